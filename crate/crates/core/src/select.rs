//! Few-shot subset selection: uniform sampling or k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Random,
    #[serde(alias = "kmeans++")]
    Kmeanspp,
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Selection::Random),
            "kmeanspp" | "kmeans++" => Ok(Selection::Kmeanspp),
            other => Err(Error::Config(format!("unknown selection strategy {other:?}"))),
        }
    }
}

/// `⌈α·n⌉`, validated to lie in `1..=n`.
pub fn subset_size(n: usize, alpha: f64) -> Result<usize> {
    if n == 0 {
        return Err(Error::Config("cannot select from an empty dataset".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("subset fraction {alpha} must lie in (0, 1]")));
    }
    let count = (alpha * n as f64).ceil() as usize;
    if count == 0 || count > n {
        return Err(Error::Config(format!("subset of {count} from {n} samples is invalid")));
    }
    Ok(count)
}

/// Squared Euclidean distance.
fn dist2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum()
}

/// k-means++ seeding: one uniform pick, then each further pick drawn with
/// probability proportional to the squared distance to its nearest already
/// chosen point. Returns indices in pick order.
pub fn kmeanspp(points: &[Vec<f32>], count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = points.len();
    if count == 0 || count > n {
        return Err(Error::Config(format!("cannot pick {count} seeds from {n} points")));
    }
    let mut chosen = Vec::with_capacity(count);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, &points[first])).collect();
    while chosen.len() < count {
        let total: f64 = nearest
            .iter()
            .zip(&taken)
            .filter(|(_, t)| !**t)
            .map(|(d, _)| *d)
            .sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, d) in nearest.iter().enumerate() {
                if taken[i] || *d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < *d {
                    break;
                }
                target -= d;
            }
            pick.expect("positive mass implies a candidate")
        } else {
            // every remaining point duplicates a chosen one
            let free: Vec<usize> = (0..n).filter(|i| !taken[*i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
        taken[pick] = true;
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(&points[i], &points[pick]));
        }
    }
    Ok(chosen)
}

/// Picks `⌈α·n⌉` distinct indices. `features` (one vector per sample) is
/// required for k-means++.
pub fn select_subset(
    n: usize,
    alpha: f64,
    strategy: Selection,
    seed: u64,
    features: Option<&[Vec<f32>]>,
) -> Result<Vec<usize>> {
    let count = subset_size(n, alpha)?;
    if count == n {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match strategy {
        Selection::Random => {
            let mut idx = rand::seq::index::sample(&mut rng, n, count).into_vec();
            idx.sort_unstable();
            Ok(idx)
        }
        Selection::Kmeanspp => {
            let feats = features.ok_or_else(|| Error::Contract("k-means++ selection needs features".into()))?;
            if feats.len() != n {
                return Err(Error::Contract(format!("{} feature rows for {n} samples", feats.len())));
            }
            kmeanspp(feats, count, &mut rng)
        }
    }
}
