//! Built-in oracle and gradient checks, run by the `selfcheck` command.

use rand::Rng;

use crate::distortion::count_degradation_space;
use crate::dsm::{gt_dsm, upsample_bilinear, Dsm};
use crate::dsmix::{assign_lambdas, RegionMap};
use crate::image::{ImageRgb, Plane};
use crate::label::SoftLabel;
use crate::losses::{
    loss_ds, loss_kd, loss_qc, loss_score, FeatureMap, FeatureSource, FeatureStack, LossWeights,
};
use crate::metrics::{plcc, srcc, ScorePairs};
use crate::nn::{NetShape, TinyNet};
use crate::rng::{self, StreamRng};
use crate::trainkit::five_patch_origins;

/// Finite-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub id: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn() -> Result<String, String>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("dsm.gt.oracle", dsm_gt_oracle),
    ("dsm.gt.block_example", dsm_block_example),
    ("dsm.upsample.constant", dsm_upsample_constant),
    ("dsmix.lambda.bruteforce", lambda_bruteforce),
    ("dsmix.lambda.scale_invariance", lambda_scale_invariance),
    ("label.mix.scatter", label_scatter),
    ("loss.ds.grad", grad_ds),
    ("loss.qc.grad", grad_qc),
    ("loss.qc.uniform", qc_uniform),
    ("loss.kd.grad", grad_kd),
    ("loss.score.grad", grad_score),
    ("loss.score.branches", score_branches),
    ("nn.backward.grad", grad_net),
    ("metrics.srcc.oracle", srcc_oracle),
    ("metrics.plcc.oracle", plcc_oracle),
    ("metrics.srcc.example", srcc_example),
    ("combinatorics.count_space", count_space),
    ("trainkit.five_patch.origins", five_patch),
];

pub fn check_ids() -> Vec<&'static str> {
    CHECKS.iter().map(|(id, _)| *id).collect()
}

pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(id, f)| {
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult { id, passed, detail }
        })
        .collect()
}

fn ensure(cond: bool, detail: String) -> Result<String, String> {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: crate::Error) -> String {
    e.to_string()
}

fn random_image(rng: &mut StreamRng, w: usize, h: usize) -> ImageRgb {
    ImageRgb::from_fn(w, h, |_, _, _| rng.random_range(0.0..1.0)).expect("in range")
}

fn dsm_gt_oracle() -> Result<String, String> {
    let mut rng = rng::stream(0, "selfcheck_dsm", 0);
    for _ in 0..20 {
        let a = random_image(&mut rng, 32, 32);
        let b = random_image(&mut rng, 32, 32);
        let dsm = gt_dsm(&a, &b, 8).map_err(err)?;
        for gy in 0..4 {
            for gx in 0..4 {
                let mut sum = 0.0;
                for y in gy * 8..gy * 8 + 8 {
                    for x in gx * 8..gx * 8 + 8 {
                        let d: f64 = (0..3).map(|c| (a.get(x, y, c) - b.get(x, y, c)).abs()).sum();
                        sum += d / 3.0;
                    }
                }
                let diff = (sum / 64.0 - dsm.get(gx, gy)).abs();
                if diff > 1e-12 {
                    return Err(format!("cell ({gx},{gy}) off by {diff:e}"));
                }
            }
        }
    }
    Ok("20 random 32x32 pairs".into())
}

fn dsm_block_example() -> Result<String, String> {
    let reference = ImageRgb::constant(16, 16, 0.1).map_err(err)?;
    let dist = ImageRgb::from_fn(16, 16, |x, y, _| if x < 8 && y < 8 { 0.5 } else { 0.1 }).map_err(err)?;
    let dsm = gt_dsm(&dist, &reference, 8).map_err(err)?;
    ensure(
        dsm.values() == [0.4, 0.0, 0.0, 0.0],
        format!("{:?}", dsm.values()),
    )
}

fn dsm_upsample_constant() -> Result<String, String> {
    let dsm = Dsm::new(3, 2, 4, vec![0.3; 6]).map_err(err)?;
    let up = upsample_bilinear(&dsm);
    ensure(up.values.iter().all(|&v| v == 0.3), "constant map stays constant".into())
}

/// Random region map with `n` sources and a random non-negative map that is
/// occasionally all zero.
fn random_region(rng: &mut StreamRng) -> (Plane, RegionMap) {
    let (w, h) = (rng.random_range(4..24), rng.random_range(4..24));
    let n = rng.random_range(1..=3usize);
    let owner: Vec<u8> = (0..w * h).map(|_| rng.random_range(0..n) as u8).collect();
    let zero = rng.random_bool(0.1);
    let values = (0..w * h)
        .map(|_| if zero { 0.0 } else { rng.random_range(0.0..1.0) })
        .collect();
    (
        Plane::new(w, h, values).expect("valid plane"),
        RegionMap::from_owners(w, h, n, owner).expect("valid owners"),
    )
}

fn brute_lambdas(map: &Plane, region: &RegionMap) -> Vec<f64> {
    let n = region.n_sources;
    let (mut mass, mut area) = (vec![0.0; n], vec![0.0; n]);
    for y in 0..map.height {
        for x in 0..map.width {
            let k = region.owner(x, y);
            mass[k] += map.get(x, y);
            area[k] += 1.0;
        }
    }
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        mass.iter().map(|m| m / total).collect()
    } else {
        let t: f64 = area.iter().sum();
        area.iter().map(|a| a / t).collect()
    }
}

fn lambda_bruteforce() -> Result<String, String> {
    let mut rng = rng::stream(0, "selfcheck_lambda", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (map, region) = random_region(&mut rng);
        let got = assign_lambdas(&map, &region).map_err(err)?;
        let want = brute_lambdas(&map, &region);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-9, format!("max deviation {worst:.3e} over 200 cases"))
}

fn lambda_scale_invariance() -> Result<String, String> {
    let mut rng = rng::stream(1, "selfcheck_lambda", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (map, region) = random_region(&mut rng);
        let base = assign_lambdas(&map, &region).map_err(err)?;
        for s in [1e-6, 1.0, 1e6] {
            let scaled = Plane::new(map.width, map.height, map.values.iter().map(|v| v * s).collect())
                .map_err(err)?;
            let got = assign_lambdas(&scaled, &region).map_err(err)?;
            for (a, b) in got.iter().zip(&base) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= 1e-9, format!("max deviation {worst:.3e}"))
}

fn label_scatter() -> Result<String, String> {
    let mut rng = rng::stream(0, "selfcheck_label", 0);
    for _ in 0..200 {
        let n = rng.random_range(1..=3usize);
        let mut classes = Vec::new();
        while classes.len() < n {
            let c = rng.random_range(0..41usize);
            if !classes.contains(&c) {
                classes.push(c);
            }
        }
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let lambdas: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let labels: Vec<SoftLabel> = classes
            .iter()
            .map(|&c| SoftLabel::one_hot(c, 41))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let refs: Vec<&SoftLabel> = labels.iter().collect();
        let mixed = SoftLabel::mix(&refs, &lambdas).map_err(err)?;
        let mut want = vec![0.0; 41];
        for (c, l) in classes.iter().zip(&lambdas) {
            want[*c] += l;
        }
        let dev = mixed
            .probs()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let sum: f64 = mixed.probs().iter().sum();
        if dev > 1e-12 || (sum - 1.0).abs() > 1e-9 {
            return Err(format!("deviation {dev:e}, sum {sum}"));
        }
    }
    Ok("200 mixes".into())
}

/// Relative error `‖g_num − g‖ / max(‖g_num‖, ‖g‖)` using central differences.
pub fn relative_grad_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let mut xp = x.to_vec();
    let mut diff2 = 0.0;
    let (mut n_num, mut n_ana) = (0.0, 0.0);
    for i in 0..x.len() {
        xp[i] = x[i] + FD_STEP;
        let up = f(&xp);
        xp[i] = x[i] - FD_STEP;
        let down = f(&xp);
        xp[i] = x[i];
        let num = (up - down) / (2.0 * FD_STEP);
        diff2 += (num - analytic[i]).powi(2);
        n_num += num * num;
        n_ana += analytic[i] * analytic[i];
    }
    let denom = n_num.sqrt().max(n_ana.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff2.sqrt() / denom
    }
}

fn grad_report(name: &str, errors: &[f64]) -> Result<String, String> {
    let worst = errors.iter().copied().fold(0.0, f64::max);
    ensure(
        worst < GRAD_TOLERANCE,
        format!("{name}: max rel err {worst:.2e} over {} instances", errors.len()),
    )
}

fn grad_ds() -> Result<String, String> {
    let mut rng = rng::stream(0, "selfcheck_grad", 0);
    let mut errors = Vec::new();
    for _ in 0..50 {
        let (w, h) = (rng.random_range(1..5), rng.random_range(1..5));
        let pred: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        let gt = Dsm::new(w, h, 8, (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect()).map_err(err)?;
        let pd = Dsm::new(w, h, 8, pred.clone()).map_err(err)?;
        let (_, g) = loss_ds(&pd, &gt).map_err(err)?;
        let f = |x: &[f64]| loss_ds(&Dsm::new(w, h, 8, x.to_vec()).unwrap(), &gt).unwrap().0;
        errors.push(relative_grad_error(&f, &pred, &g));
    }
    grad_report("L_DS", &errors)
}

fn grad_qc() -> Result<String, String> {
    let mut rng = rng::stream(1, "selfcheck_grad", 0);
    let mut errors = Vec::new();
    for _ in 0..50 {
        let c = rng.random_range(2..12);
        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-5.0..5.0)).collect();
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let target: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let (_, g) = loss_qc(&logits, &target).map_err(err)?;
        let f = |x: &[f64]| loss_qc(x, &target).unwrap().0;
        errors.push(relative_grad_error(&f, &logits, &g));
    }
    grad_report("L_QC", &errors)
}

fn qc_uniform() -> Result<String, String> {
    for c in [2usize, 9, 41] {
        let mut target = vec![0.0; c];
        target[c / 2] = 1.0;
        let (l, _) = loss_qc(&vec![0.7; c], &target).map_err(err)?;
        if (l - (c as f64).ln()).abs() > 1e-9 {
            return Err(format!("C={c}: {l} vs ln C"));
        }
    }
    Ok("C in {2, 9, 41}".into())
}

/// Random stack whose stage 2/3 entries stay at least `gap` away from the
/// paired teacher entries, so central differences never straddle the MAE kink.
pub fn random_kd_pair(rng: &mut StreamRng, gap: f64) -> (FeatureStack, FeatureStack) {
    let shapes = [(2, 4, 4), (3, 2, 2), (4, 2, 1)];
    let mut s_maps = Vec::new();
    let mut t_maps = Vec::new();
    for (i, &(c, h, w)) in shapes.iter().enumerate() {
        let n = c * h * w;
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: Vec<f64> = t
            .iter()
            .map(|&v| {
                if i < 2 {
                    let d = rng.random_range(gap..1.0);
                    if rng.random_bool(0.5) {
                        v + d
                    } else {
                        v - d
                    }
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        s_maps.push(FeatureMap::new(c, h, w, s).unwrap());
        t_maps.push(FeatureMap::new(c, h, w, t).unwrap());
    }
    let to_stack = |mut v: Vec<FeatureMap>, src| {
        let c = v.pop().unwrap();
        let b = v.pop().unwrap();
        let a = v.pop().unwrap();
        FeatureStack::new([a, b, c], src)
    };
    (
        to_stack(s_maps, FeatureSource::Student),
        to_stack(t_maps, FeatureSource::Teacher),
    )
}

fn flatten(stack: &FeatureStack) -> Vec<f64> {
    stack.stages.iter().flat_map(|s| s.data.iter().copied()).collect()
}

fn unflatten(like: &FeatureStack, x: &[f64]) -> FeatureStack {
    let mut out = like.clone();
    let mut at = 0;
    for s in out.stages.iter_mut() {
        let n = s.data.len();
        s.data.copy_from_slice(&x[at..at + n]);
        at += n;
    }
    out
}

fn grad_kd() -> Result<String, String> {
    let mut rng = rng::stream(2, "selfcheck_grad", 0);
    let w = LossWeights::default();
    let mut errors = Vec::new();
    for _ in 0..50 {
        let (s, t) = random_kd_pair(&mut rng, 1e-3);
        let out = loss_kd(&s, &t, &w).map_err(err)?;
        let x = flatten(&s);
        let g = flatten(&out.grad);
        let f = |x: &[f64]| loss_kd(&unflatten(&s, x), &t, &w).unwrap().value;
        errors.push(relative_grad_error(&f, &x, &g));
    }
    grad_report("L_KD", &errors)
}

fn grad_score() -> Result<String, String> {
    let mut rng = rng::stream(3, "selfcheck_grad", 0);
    let mut errors = Vec::new();
    for _ in 0..50 {
        let n = rng.random_range(1..10);
        let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let pred: Vec<f64> = gt
            .iter()
            .map(|g| {
                // Keep |d| away from the branch point at 1.
                let d: f64 = rng.random_range(0.0..3.0);
                let d = if (d - 1.0).abs() < 1e-3 { d + 0.01 } else { d };
                if rng.random_bool(0.5) { g + d } else { g - d }
            })
            .collect();
        let (_, g) = loss_score(&pred, &gt).map_err(err)?;
        let f = |x: &[f64]| loss_score(x, &gt).unwrap().0;
        errors.push(relative_grad_error(&f, &pred, &g));
    }
    grad_report("L_Score", &errors)
}

fn score_branches() -> Result<String, String> {
    let mut got = Vec::new();
    for d in [0.5, 1.0, 2.0] {
        got.push(loss_score(&[d], &[0.0]).map_err(err)?.0);
    }
    ensure(got == [0.125, 0.5, 1.5], format!("{got:?}"))
}

fn grad_net() -> Result<String, String> {
    let mut rng = rng::stream(4, "selfcheck_grad", 0);
    let img = random_image(&mut rng, 8, 8);
    let net = TinyNet::new(NetShape::default(), 11);
    let target: Vec<f64> = {
        let raw: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    };
    let cache = net.forward(&img).map_err(err)?;
    let (_, dt) = loss_qc(&cache.type_logits, &target).map_err(err)?;
    let dl = vec![0.0; cache.level_logits.len()];
    let mut grad = vec![0.0; net.num_params()];
    net.backward(&cache, &dt, &dl, None, &mut grad).map_err(err)?;
    // Finite differences over a strided subset of parameters.
    let idx: Vec<usize> = (0..net.num_params()).step_by(41).collect();
    let x: Vec<f64> = idx.iter().map(|&i| net.params()[i]).collect();
    let g: Vec<f64> = idx.iter().map(|&i| grad[i]).collect();
    let f = |x: &[f64]| {
        let mut n = net.clone();
        let p = n.params_mut().unwrap();
        for (&i, v) in idx.iter().zip(x) {
            p[i] = *v;
        }
        loss_qc(&n.forward(&img).unwrap().type_logits, &target).unwrap().0
    };
    grad_report("TinyNet+L_QC", &[relative_grad_error(&f, &x, &g)])
}

fn pearson_on_ranks(u: &[f64], v: &[f64]) -> f64 {
    let rank = |x: &[f64]| {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let mut r = vec![0.0; x.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64 + 1.0;
        }
        r
    };
    let (ru, rv) = (rank(u), rank(v));
    let n = u.len() as f64;
    let (mu, mv) = (ru.iter().sum::<f64>() / n, rv.iter().sum::<f64>() / n);
    let cov: f64 = ru.iter().zip(&rv).map(|(a, b)| (a - mu) * (b - mv)).sum();
    let su: f64 = ru.iter().map(|a| (a - mu).powi(2)).sum();
    let sv: f64 = rv.iter().map(|b| (b - mv).powi(2)).sum();
    cov / (su * sv).sqrt()
}

fn srcc_oracle() -> Result<String, String> {
    let mut rng = rng::stream(0, "selfcheck_metrics", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let u: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let v: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let got = srcc(&ScorePairs::new(u.clone(), v.clone()).map_err(err)?).map_err(err)?;
        worst = worst.max((got - pearson_on_ranks(&u, &v)).abs());
    }
    ensure(worst <= 1e-9, format!("max deviation {worst:.2e}"))
}

fn plcc_oracle() -> Result<String, String> {
    let mut rng = rng::stream(1, "selfcheck_metrics", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let u: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = u.iter().map(|x| x + rng.random_range(-1.0..1.0)).collect();
        let got = plcc(&ScorePairs::new(u.clone(), v.clone()).map_err(err)?).map_err(err)?;
        let n = u.len() as f64;
        let mu = u.iter().sum::<f64>() / n;
        let mv = v.iter().sum::<f64>() / n;
        let cov: f64 = u.iter().zip(&v).map(|(a, b)| (a - mu) * (b - mv)).sum::<f64>() / n;
        let su = (u.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / n).sqrt();
        let sv = (v.iter().map(|b| (b - mv).powi(2)).sum::<f64>() / n).sqrt();
        worst = worst.max((got - cov / (su * sv)).abs());
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:.2e}"))
}

fn srcc_example() -> Result<String, String> {
    let fwd = srcc(&ScorePairs::new(vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 4.0, 3.0]).map_err(err)?)
        .map_err(err)?;
    let rev = srcc(&ScorePairs::new(vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 3.0, 2.0, 1.0]).map_err(err)?)
        .map_err(err)?;
    ensure(fwd == 0.8 && rev == -1.0, format!("swap {fwd}, reversal {rev}"))
}

/// Counts ordered non-repeating selections of 1..=n items by enumeration.
pub fn enumerate_ordered_selections(n: usize) -> u64 {
    fn go(used: &mut [bool], depth: usize) -> u64 {
        let mut count = 0;
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                count += 1 + go(used, depth + 1);
                used[i] = false;
            }
        }
        count
    }
    go(&mut vec![false; n], 0)
}

/// Note printed alongside the exact degradation-space count.
pub const COUNT_SPACE_NOTE: &str =
    "the figure of roughly 2e6 sometimes quoted for 9 distortion types overstates the exact count of 986409";

fn count_space() -> Result<String, String> {
    let closed = count_degradation_space(9, false).map_err(err)?;
    let brute = enumerate_ordered_selections(9);
    ensure(
        closed == 986_409 && u128::from(brute) == closed,
        format!("closed form {closed}, enumeration {brute}; {COUNT_SPACE_NOTE}"),
    )
}

fn five_patch() -> Result<String, String> {
    let o = five_patch_origins(64, 64, 32).map_err(err)?;
    ensure(
        o == [(0, 0), (32, 0), (0, 32), (32, 32), (16, 16)],
        format!("{o:?}"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_all() {
            assert!(r.passed, "{}: {}", r.id, r.detail);
        }
    }

    #[test]
    fn registry_has_lambda_check() {
        assert!(check_ids().contains(&"dsmix.lambda.bruteforce"));
    }
}
