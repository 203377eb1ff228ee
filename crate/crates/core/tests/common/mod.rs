#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::Rng;
use unfused::encoder::{EncoderParams, ParamGroup};
use unfused::rng;

/// Random log-mel-like input maps of `width` values.
pub fn random_inputs(n: usize, width: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::rng(seed);
    (0..n)
        .map(|_| (0..width).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect()
}

fn with_coordinate(params: &mut EncoderParams, blob: usize, index: usize, f: impl FnOnce(&mut f64)) {
    let mut seen = 0;
    let mut f = Some(f);
    params.visit_mut(|_, b| {
        if seen == blob {
            (f.take().unwrap())(&mut b.data[index]);
        }
        seen += 1;
    });
}

pub struct GradCheck {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Denominator floor of the relative error: gradients below this magnitude
/// are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Central differences with step `h` on `per_blob` random coordinates of
/// every blob in `groups`.
pub fn gradient_check(
    params: &EncoderParams,
    analytic: &EncoderParams,
    groups: &[ParamGroup],
    per_blob: usize,
    h: f64,
    seed: u64,
    loss: impl Fn(&EncoderParams) -> f64,
) -> GradCheck {
    let mut r = rng::rng(seed);
    let mut picks = Vec::new();
    let mut blob = 0;
    analytic.visit(|name, b| {
        if groups.contains(&ParamGroup::of(name)) {
            let all: Vec<usize> = (0..b.len()).collect();
            for &i in all.choose_multiple(&mut r, per_blob.min(b.len())) {
                picks.push((blob, i, name.to_string(), b.data[i]));
            }
        }
        blob += 1;
    });
    let mut work = params.clone();
    let mut out = GradCheck {
        coordinates: picks.len(),
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for (blob, i, name, a) in picks {
        let mut orig = 0.0;
        with_coordinate(&mut work, blob, i, |v| {
            orig = *v;
            *v = orig + h;
        });
        let up = loss(&work);
        with_coordinate(&mut work, blob, i, |v| *v = orig - h);
        let down = loss(&work);
        with_coordinate(&mut work, blob, i, |v| *v = orig);
        let n = (up - down) / (2.0 * h);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst = format!("{name}[{i}]: analytic {a:e}, numeric {n:e}");
        }
    }
    out
}

/// Exhaustive best objective for two clusters: each side's optimal centroid
/// is its normalized sum, scoring the sum's norm.
pub fn exhaustive_two_cluster_objective(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let d = rows[0].len();
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << (n - 1)) {
        let mut sums = [vec![0.0; d], vec![0.0; d]];
        for (i, row) in rows.iter().enumerate() {
            let side = if i == n - 1 { 0 } else { ((mask >> i) & 1) as usize };
            sums[side].iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        let score: f64 = sums.iter().map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
        best = best.max(score);
    }
    -best / n as f64
}
