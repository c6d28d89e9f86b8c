use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wecolora::eval::{
    accuracy_on_features, argmax, attention_rollout, cls_features, cosine, cosine_layer_similarity,
    export_embeddings, linear_probe, rollout_from_attentions, top1_accuracy, train_probe_on_features, ProbeHead,
    ProbeOptions,
};
use wecolora::vit::{ViTConfig, ViTModel};
use wecolora::{attach_enhanced, Dataset, Tensor};

fn config(depth: usize) -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        dim: 8,
        depth,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 0,
    }
}

fn dataset(n: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset {
        images: (0..n)
            .map(|_| Tensor::from_fn([1, 8, 8], |_| rng.random_range(-1.0..1.0)))
            .collect(),
        labels: Some((0..n).map(|i| i % classes).collect()),
        num_classes: classes,
    }
}

fn snapshot(model: &ViTModel) -> Vec<(String, Vec<f32>)> {
    model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.into_data()))
        .collect()
}

#[test]
fn permuted_labels_score_near_chance() {
    let model = ViTModel::init_random(&config(2), 1).unwrap();
    let mut data = dataset(1000, 4, 2);
    let head = linear_probe(&model, &data, &ProbeOptions::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    data.labels.as_mut().unwrap().shuffle(&mut rng);
    let acc = top1_accuracy(&head, &model, &data).unwrap();
    assert!((acc - 0.25).abs() <= 0.05, "accuracy {acc}");
}

#[test]
fn probing_leaves_backbone_untouched() {
    let model = ViTModel::init_random(&config(2), 5).unwrap();
    let before = snapshot(&model);
    let data = dataset(40, 3, 6);
    let head = linear_probe(&model, &data, &ProbeOptions::default(), 7).unwrap();
    top1_accuracy(&head, &model, &data).unwrap();
    assert_eq!(before, snapshot(&model));
}

#[test]
fn constant_features_give_majority_fraction() {
    let feats = vec![vec![0.3f32, -1.0, 2.0]; 50];
    let labels: Vec<usize> = (0..50).map(|i| if i < 30 { 2 } else { i % 2 }).collect();
    let head = train_probe_on_features(&feats, &labels, 3, &ProbeOptions::default(), 0).unwrap();
    let acc = accuracy_on_features(&head, &feats, &labels).unwrap();
    assert!((acc - 0.6).abs() < 1e-6, "accuracy {acc}");
}

#[test]
fn separable_features_are_fit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for i in 0..80 {
        let y = i % 2;
        let sign = if y == 0 { -1.0 } else { 1.0 };
        feats.push(vec![sign * rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0)]);
        labels.push(y);
    }
    let head = train_probe_on_features(&feats, &labels, 2, &ProbeOptions::default(), 1).unwrap();
    assert_eq!(accuracy_on_features(&head, &feats, &labels).unwrap(), 1.0);
}

#[test]
fn empty_sets_are_config_errors() {
    let head = ProbeHead::zeros(2, 8);
    let model = ViTModel::init_random(&config(1), 0).unwrap();
    let empty = Dataset {
        images: Vec::new(),
        labels: Some(Vec::new()),
        num_classes: 2,
    };
    assert_eq!(top1_accuracy(&head, &model, &empty).unwrap_err().exit_code(), 2);
    assert_eq!(accuracy_on_features(&head, &[], &[]).unwrap_err().exit_code(), 2);
    assert_eq!(linear_probe(&model, &empty, &ProbeOptions::default(), 0).unwrap_err().exit_code(), 2);
}

#[test]
fn argmax_ties_take_lowest_index() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    assert_eq!(argmax(&[-2.0]), 0);
}

#[test]
fn cosine_reference_values() {
    let v = [0.5f32, -1.5, 2.0, 0.25];
    let neg: Vec<f32> = v.iter().map(|x| -x).collect();
    assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
    assert!((cosine(&v, &neg) + 1.0).abs() < 1e-12);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
}

#[test]
fn untrained_adapters_at_r1_are_identical() {
    let teacher = ViTModel::init_random(&config(3), 9).unwrap();
    let mut student = teacher.clone();
    attach_enhanced(&mut student, 2, 10).unwrap();
    let imgs = dataset(3, 2, 11).images;
    let report = cosine_layer_similarity(&teacher, &student, 1, &imgs).unwrap();
    assert_eq!(report.layers.len(), 3);
    for l in &report.layers {
        assert_eq!(l.student_layer, l.teacher_layer);
        assert!((l.mean_cosine - 1.0).abs() < 1e-9, "{l:?}");
    }
}

#[test]
fn cosine_pairs_student_l_with_teacher_lr() {
    let teacher = ViTModel::init_random(&config(4), 12).unwrap();
    let mut student = ViTModel::init_random(&config(2), 13).unwrap();
    student.patch_embed = teacher.patch_embed.clone();
    student.cls_token = teacher.cls_token.clone();
    student.pos_embed = teacher.pos_embed.clone();
    student.blocks[0] = teacher.blocks[1].clone();
    let imgs = dataset(2, 2, 14).images;
    let report = cosine_layer_similarity(&teacher, &student, 2, &imgs).unwrap();
    assert_eq!(report.layers[0].teacher_layer, 2);
    assert_eq!(report.layers[1].teacher_layer, 4);
    assert!(report.layers[0].mean_cosine < 1.0);
    assert!(cosine_layer_similarity(&teacher, &student, 3, &imgs).is_err());
}

fn close(a: &Tensor, b: &[f32]) {
    for (x, y) in a.data().iter().zip(b) {
        assert!((x - y).abs() < 1e-6, "{:?} vs {b:?}", a.data());
    }
}

#[test]
fn rollout_two_layer_hand_example() {
    let a1 = Tensor::new([1, 2, 2], vec![0.6, 0.4, 0.2, 0.8]).unwrap();
    let a2 = Tensor::new([1, 2, 2], vec![0.5, 0.5, 0.9, 0.1]).unwrap();
    let (joint, layers) = rollout_from_attentions(&[a1, a2], 1.0).unwrap();
    close(&layers[0], &[0.8, 0.2, 0.1, 0.9]);
    close(&joint, &[0.625, 0.375, 0.415, 0.585]);
}

#[test]
fn rollout_fuses_heads_by_max_and_filters() {
    // heads fuse to [[0.6,0.4],[0.3,0.8]]; keeping the top half zeroes 0.4 and 0.3
    let att = Tensor::new([2, 2, 2], vec![0.6, 0.4, 0.2, 0.8, 0.1, 0.1, 0.3, 0.7]).unwrap();
    let (joint, _) = rollout_from_attentions(&[att], 0.5).unwrap();
    close(&joint, &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn single_token_rollout_is_one() {
    let att = Tensor::new([3, 1, 1], vec![1.0; 3]).unwrap();
    let (joint, _) = rollout_from_attentions(&[att.clone(), att], 0.3).unwrap();
    assert_eq!(joint.data(), &[1.0]);
}

#[test]
fn uniform_attention_with_top_one_stays_uniform() {
    let t = 5;
    let att = Tensor::full([2, t, t], 1.0 / t as f32);
    let (joint, _) = rollout_from_attentions(&[att.clone(), att.clone(), att], 1.0).unwrap();
    // each layer is 0.5·U + 0.5·I, so k layers give (1 − 0.5ᵏ)·U + 0.5ᵏ·I
    let expect: Vec<f32> = (0..t * t)
        .map(|i| 0.875 / t as f32 + if i / t == i % t { 0.125 } else { 0.0 })
        .collect();
    close(&joint, &expect);
}

#[test]
fn model_rollout_rows_are_distributions() {
    let model = ViTModel::init_random(&config(3), 15).unwrap();
    let img = &dataset(1, 1, 16).images[0];
    let r = attention_rollout(&model, img, 0.9).unwrap();
    assert_eq!(r.layers.len(), 3);
    assert_eq!(r.heatmap.shape(), &[2, 2]);
    for i in 0..5 {
        let s: f32 = r.matrix.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!(r.matrix.row(i).iter().all(|v| *v >= 0.0));
    }
    assert!(attention_rollout(&model, img, 0.0).is_err());
}

#[test]
fn export_round_trip() {
    let model = ViTModel::init_random(&config(2), 17).unwrap();
    let data = dataset(6, 3, 18);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    export_embeddings(&model, &data, &a).unwrap();
    export_embeddings(&model, &data, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.as_bytes(), std::fs::read(&b).unwrap().as_slice());

    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), data.len() + 1);
    assert_eq!(lines[0].split(',').count(), 9);
    let feats = cls_features(&model, data.images()).unwrap();
    for (i, line) in lines[1..].iter().enumerate() {
        let mut cols = line.split(',');
        assert_eq!(cols.next().unwrap().parse::<usize>().unwrap(), i % 3);
        let parsed: Vec<f32> = cols.map(|c| c.parse().unwrap()).collect();
        assert_eq!(parsed, feats[i]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn argmax_survives_monotone_maps(v in prop::collection::vec(-10.0f32..10.0, 1..12), a in 0.1f32..5.0, b in -3.0f32..3.0) {
        let mapped: Vec<f32> = v.iter().map(|x| a * x + b).collect();
        let cubed: Vec<f32> = v.iter().map(|x| x * x * x).collect();
        let i = argmax(&v);
        prop_assert_eq!(v[argmax(&mapped)], v[i]);
        prop_assert_eq!(v[argmax(&cubed)], v[i]);
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(
        v in prop::collection::vec(-5.0f32..5.0, 2..16),
        s in 0.1f32..10.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f32> = v.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = cosine(&v, &w);
        prop_assert!((-1.0..=1.0).contains(&c));
        let scaled: Vec<f32> = v.iter().map(|x| x * s).collect();
        prop_assert!((cosine(&scaled, &w) - c).abs() < 1e-5);
        prop_assert!((cosine(&w, &v) - c).abs() < 1e-12);
    }

    #[test]
    fn rollout_rows_sum_to_one(seed in any::<u64>(), t in 1usize..6, layers in 1usize..4, frac in 0.05f32..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let atts: Vec<Tensor> = (0..layers)
            .map(|_| {
                let mut data = Vec::new();
                for _ in 0..2 * t {
                    let row: Vec<f32> = (0..t).map(|_| rng.random_range(0.01..1.0)).collect();
                    let s: f32 = row.iter().sum();
                    data.extend(row.iter().map(|x| x / s));
                }
                Tensor::new([2, t, t], data).unwrap()
            })
            .collect();
        let (joint, _) = rollout_from_attentions(&atts, frac).unwrap();
        for i in 0..t {
            let s: f32 = joint.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
