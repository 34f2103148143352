//! Independent reference implementations used by the integration tests.
//!
//! None of these call into the engine's numerical code: decisions use exact
//! integer arithmetic, tail probabilities come from statrs, integrals use
//! composite Simpson rules, and sampling uses rand_distr.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use statrs::distribution::{Beta as StatrsBeta, ContinuousCDF};

/// i3+3 action as a character, from exact rational comparisons.
///
/// The interval is given in integer percent, so `y/n` vs `lo/100` compares
/// `100 y` with `lo n` and never touches floating point.
pub fn table1(y: u32, n: u32, lo_pct: u32, hi_pct: u32) -> char {
    assert!(n >= 1 && y <= n);
    let below = |k: u32| 100 * k < lo_pct * n;
    let above = |k: u32| 100 * k > hi_pct * n;
    if below(y) {
        'E'
    } else if !above(y) {
        'S'
    } else if below(y - 1) {
        // Above the interval, but one fewer DLT would be below it.
        'S'
    } else {
        'D'
    }
}

/// Pr(p > p_T) under Beta(1 + y, 1 + n - y), via statrs.
pub fn beta_tail(y: u32, n: u32, p_t: f64) -> f64 {
    StatrsBeta::new(1.0 + y as f64, 1.0 + (n - y) as f64).unwrap().sf(p_t)
}

/// Exact weighted isotonic regression by exhaustive search over contiguous partitions.
///
/// The monotone least-squares solution is constant on blocks of consecutive
/// indices and equals the block's weighted mean there; among partitions whose
/// block means are non-decreasing the one with least weighted SSE is the
/// projection onto the monotone cone.
pub fn isotonic_exhaustive(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let k = values.len();
    assert!((1..=12).contains(&k));
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << (k - 1)) {
        // bit i set => a block boundary after index i
        let mut fit = vec![0.0; k];
        let mut means = Vec::new();
        let mut start = 0;
        for i in 0..k {
            if i == k - 1 || mask & (1 << i) != 0 {
                let (mut sw, mut swv) = (0.0, 0.0);
                for j in start..=i {
                    sw += weights[j];
                    swv += weights[j] * values[j];
                }
                let m = swv / sw;
                fit[start..=i].iter_mut().for_each(|x| *x = m);
                means.push(m);
                start = i + 1;
            }
        }
        if means.windows(2).any(|w| w[0] > w[1] + 1e-15) {
            continue;
        }
        let sse: f64 = (0..k).map(|i| weights[i] * (fit[i] - values[i]).powi(2)).sum();
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, fit));
        }
    }
    best.expect("the single-block partition is always feasible").1
}

/// Composite Simpson rule on [a, b] with `panels` (even) sub-intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    assert!(panels.is_multiple_of(2));
    let h = (b - a) / panels as f64;
    let mut s = f(a) + f(b);
    for i in 1..panels {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
    }
    s * h / 3.0
}

/// Probability that a patient DLT-free through fraction `w` eventually has a DLT
/// when time to DLT is uniform over the window.
pub fn eventual_dlt(p: f64, w: f64) -> f64 {
    p * (1.0 - w) / (1.0 - p * w)
}

/// Integer ln Beta for positive integers via factorial sums (exact enough in f64).
fn ln_beta_int(a: u32, b: u32) -> f64 {
    let lf = |n: u32| (1..=n).map(|i| (i as f64).ln()).sum::<f64>();
    lf(a - 1) + lf(b - 1) - lf(a + b - 1)
}

/// Weight of one configuration of missing outcomes under the Beta(1 + y, 1 + n - y) posterior.
pub fn configuration_weight(y: u32, n: u32, ws: &[f64], outcomes: &[bool]) -> f64 {
    let (a, b) = (1 + y, 1 + n - y);
    let inv_beta = (-ln_beta_int(a, b)).exp();
    let density = |p: f64| {
        let mut f = p.powi(a as i32 - 1) * (1.0 - p).powi(b as i32 - 1) * inv_beta;
        for (&w, &o) in ws.iter().zip(outcomes) {
            let pi = eventual_dlt(p, w);
            f *= if o { pi } else { 1.0 - pi };
        }
        f
    };
    simpson(density, 0.0, 1.0, 4000)
}

/// γ = (E, S, D) by brute-force enumeration of all 2^m configurations.
pub fn gammas_by_enumeration(y: u32, n: u32, ws: &[f64], lo_pct: u32, hi_pct: u32) -> [f64; 3] {
    let m = ws.len();
    let n_total = n + m as u32;
    let mut g = [0.0; 3];
    for mask in 0u32..(1 << m) {
        let outcomes: Vec<bool> = (0..m).map(|j| mask & (1 << j) != 0).collect();
        let extra = outcomes.iter().filter(|&&o| o).count() as u32;
        let w = configuration_weight(y, n, ws, &outcomes);
        g[action_index(table1(y + extra, n_total, lo_pct, hi_pct))] += w;
    }
    g
}

pub fn action_index(a: char) -> usize {
    match a {
        'E' => 0,
        'S' => 1,
        'D' => 2,
        other => panic!("unexpected action {other}"),
    }
}

/// Monte Carlo γ: draw p from the resolved-data posterior, then for each pending
/// patient draw a DLT indicator and a uniform DLT time, redrawing that patient
/// until they are consistent with being DLT-free at their current follow-up.
/// Returns (γ, standard errors).
pub fn gammas_by_monte_carlo(
    y: u32,
    n: u32,
    ws: &[f64],
    lo_pct: u32,
    hi_pct: u32,
    draws: usize,
    seed: u64,
) -> ([f64; 3], [f64; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = Beta::new(1.0 + y as f64, 1.0 + (n - y) as f64).unwrap();
    let m = ws.len() as u32;
    let actions: Vec<usize> = (0..=m).map(|s| action_index(table1(y + s, n + m, lo_pct, hi_pct))).collect();
    let mut hits = [0usize; 3];
    let mut accepted = 0;
    while accepted < draws {
        let p: f64 = beta.sample(&mut rng);
        let mut dlts = 0;
        for &w in ws {
            loop {
                let dlt = rng.random::<f64>() < p;
                let t: f64 = rng.random();
                if !(dlt && t < w) {
                    dlts += dlt as u32;
                    break;
                }
            }
        }
        accepted += 1;
        hits[actions[dlts as usize]] += 1;
    }
    let g = hits.map(|h| h as f64 / draws as f64);
    let se = g.map(|x| (x * (1.0 - x) / draws as f64).sqrt());
    (g, se)
}

/// Marginal likelihood of per-dose binomial data under the change-point model
/// with change point `h`, by a tensor-product Simpson rule over
/// (β0, log β1, log β2) against their normal priors.
pub fn change_point_marginal(v: &[u32], n: &[u32], h: usize, points: usize) -> f64 {
    let sd = 10f64.sqrt();
    let span = 7.0 * sd;
    let lnc = |n: u32, k: u32| {
        let lf = |n: u32| (1..=n).map(|i| (i as f64).ln()).sum::<f64>();
        lf(n) - lf(k) - lf(n - k)
    };
    let coef: f64 = v.iter().zip(n).map(|(&v, &n)| lnc(n, v)).sum();
    let norm_pdf = |x: f64, mu: f64| (-(x - mu).powi(2) / (2.0 * 10.0)).exp() / (2.0 * std::f64::consts::PI * 10.0).sqrt();
    let loglik = |b0: f64, b1: f64, b2: f64| {
        let mut ll = 0.0;
        for d in 1..=n.len() {
            if n[d - 1] == 0 {
                continue;
            }
            let x = d as f64;
            let eta = if d <= h { b0 + b1 * x } else { b0 + b1 * (b2 + h as f64) };
            let q = 1.0 / (1.0 + (-eta).exp());
            let q = q.clamp(1e-300, 1.0 - 1e-16);
            ll += v[d - 1] as f64 * q.ln() + (n[d - 1] - v[d - 1]) as f64 * (1.0 - q).ln();
        }
        ll
    };
    // A plateau that starts at the last dose ignores β2 entirely.
    let uses_b2 = h < n.len() && n[h..].iter().any(|&x| x > 0);
    let grid = |lo: f64, hi: f64| -> Vec<(f64, f64)> {
        let panels = points - points % 2;
        let step = (hi - lo) / panels as f64;
        (0..=panels)
            .map(|i| {
                let c = if i == 0 || i == panels { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                (lo + i as f64 * step, c * step / 3.0)
            })
            .collect()
    };
    let g0 = grid(-2.0 - span, -2.0 + span);
    let g1 = grid(-span, span);
    let g2 = if uses_b2 { grid(-span, span) } else { vec![(0.0, 1.0)] };
    let mut total = 0.0;
    for &(b0, w0) in &g0 {
        let p0 = norm_pdf(b0, -2.0) * w0;
        for &(u1, w1) in &g1 {
            let p1 = norm_pdf(u1, 0.0) * w1;
            let b1 = u1.exp();
            for &(u2, w2) in &g2 {
                let p2 = if uses_b2 { norm_pdf(u2, 0.0) * w2 } else { 1.0 };
                total += p0 * p1 * p2 * (loglik(b0, b1, u2.exp()) + coef).exp();
            }
        }
    }
    total
}

/// Monte Carlo ξ = Pr(q_{k+} > q_k) under independent Beta(1 + v, 1 + n - v) posteriors.
pub fn xi_monte_carlo(v: &[u32], n: &[u32], k: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists: Vec<Beta<f64>> = v
        .iter()
        .zip(n)
        .map(|(&v, &n)| Beta::new(1.0 + v as f64, 1.0 + (n - v) as f64).unwrap())
        .collect();
    let mut hits = 0usize;
    for _ in 0..draws {
        let q: Vec<f64> = dists.iter().map(|d| d.sample(&mut rng)).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for i in k..n.len() {
            num += n[i] as f64 * q[i];
            den += n[i] as f64;
        }
        let q_plus = if den > 0.0 { num / den } else { 0.0 };
        if q_plus > q[k - 1] {
            hits += 1;
        }
    }
    hits as f64 / draws as f64
}

/// Result of the plain i3+3 reference trial.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainTrial {
    pub path: Vec<usize>,
    pub n: Vec<u32>,
    pub y: Vec<u32>,
    pub stopped: bool,
}

/// A plain i3+3 trial without backfill: cohorts of three arrive instantly,
/// every outcome is read at the end of the window, and patient `k`'s DLT is
/// `u_k < p_dose` for the supplied uniforms. Outcomes are resolved one at a
/// time in enrollment order and the exclusion rule is checked after each.
pub fn plain_i3p3(tox: &[f64], max_main_n: u32, uniform: impl Fn(u64) -> f64) -> PlainTrial {
    let num = tox.len();
    let (lo, hi, p_t, eta) = (25, 35, 0.3, 0.95);
    let mut n = vec![0u32; num];
    let mut y = vec![0u32; num];
    let mut excluded = vec![false; num];
    let mut path = vec![1usize];
    let mut d = 1usize;
    let mut next_id = 0u64;
    let mut main = 0u32;
    let mut closed = false;
    let mut stopped = false;
    // Outcomes still to be read, oldest first: (dose, dlt, is current cohort)
    let mut pending: std::collections::VecDeque<(usize, bool)> = Default::default();
    let mut cohort_ids: Vec<u64> = Vec::new();
    let enroll = |d: usize, next_id: &mut u64, pending: &mut std::collections::VecDeque<(usize, bool)>| {
        let mut ids = Vec::new();
        for _ in 0..3 {
            let id = *next_id;
            *next_id += 1;
            pending.push_back((d, uniform(id) < tox[d - 1]));
            ids.push(id);
        }
        ids
    };
    cohort_ids.extend(enroll(d, &mut next_id, &mut pending));
    main += 3;
    if main >= max_main_n {
        closed = true;
    }
    let mut cohort_left = 3;
    while let Some((dose, dlt)) = pending.pop_front() {
        n[dose - 1] += 1;
        y[dose - 1] += dlt as u32;
        if dose == d && cohort_left > 0 {
            cohort_left -= 1;
        }
        if let Some(first) = (1..=num).find(|&k| n[k - 1] >= 3 && beta_tail(y[k - 1], n[k - 1], p_t) > eta) {
            excluded[first - 1..].iter_mut().for_each(|e| *e = true);
            if first == 1 {
                stopped = true;
            }
        }
        if stopped || closed {
            continue;
        }
        let next = if excluded[d - 1] {
            Some((1..=num).rev().find(|&k| !excluded[k - 1]).expect("dose 1 open"))
        } else if cohort_left == 0 {
            let a = table1(y[d - 1], n[d - 1], lo, hi);
            let a = if a == 'E' && (d == num || excluded[d]) { 'S' } else { a };
            Some(match a {
                'E' => d + 1,
                'S' => d,
                _ => d.saturating_sub(1).max(1),
            })
        } else {
            None
        };
        if let Some(nd) = next {
            d = nd;
            path.push(d);
            cohort_ids = enroll(d, &mut next_id, &mut pending);
            cohort_left = 3;
            main += 3;
            if main >= max_main_n {
                closed = true;
            }
        }
    }
    let _ = cohort_ids;
    PlainTrial { path, n, y, stopped }
}

/// Draw a random tally for POD tests: (y, n evaluated, pending fractions).
pub fn random_pod_tally(rng: &mut impl Rng, max_pending: usize) -> (u32, u32, Vec<f64>) {
    let n: u32 = rng.random_range(1..=12);
    let y: u32 = rng.random_range(0..=n.min(5));
    let m = rng.random_range(1..=max_pending);
    let mut ws: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..0.98)).collect();
    ws.sort_by(f64::total_cmp);
    (y, n, ws)
}
