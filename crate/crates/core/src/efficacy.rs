//! Efficacy inference: the backfill-floor screen run during the trial and the
//! change-point dose-efficacy model used for the final OBD.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::EfficacyError;
use crate::numerics::{derive_seed, ln_choose, log_sum_exp, logistic, softplus};
use crate::trial::{DesignParams, Dose, TrialState};

pub const DEFAULT_IS_DRAWS: usize = 20_000;

/// Prior on the intercept: N(-2, variance 10).
pub const BETA0_MEAN: f64 = -2.0;
pub const PRIOR_VARIANCE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EfficacyScreenConfig {
    pub prior_a: f64,
    pub prior_b: f64,
    pub mc_draws: usize,
    pub seed: u64,
}

impl Default for EfficacyScreenConfig {
    fn default() -> Self {
        EfficacyScreenConfig { prior_a: 1.0, prior_b: 1.0, mc_draws: 4000, seed: 0 }
    }
}

impl EfficacyScreenConfig {
    pub fn validate(&self) -> Result<(), crate::error::ValidationError> {
        use crate::error::{FieldError, ValidationError};
        let mut errs = Vec::new();
        if !(self.prior_a > 0.0) || !(self.prior_b > 0.0) {
            errs.push(FieldError { field: "prior_a/prior_b".into(), message: "must be positive".into() });
        }
        if self.mc_draws < 1000 {
            errs.push(FieldError { field: "mc_draws".into(), message: "must be at least 1000".into() });
        }
        if errs.is_empty() { Ok(()) } else { Err(ValidationError(errs)) }
    }
}

/// Counter-seeded SplitMix64 stream. One stream per (dose, draw, side) keeps
/// the screen's random numbers aligned when the data at one dose change.
#[derive(Debug, Clone)]
struct SplitMix(u64);

impl RngCore for SplitMix {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// Draws Gamma(prior + count, 1) as Gamma(prior) plus `count` unit exponentials,
/// so that adding an observation only ever adds a non-negative term.
struct GammaSum {
    prior: f64,
    prior_dist: Option<Gamma<f64>>,
}

impl GammaSum {
    fn new(prior: f64) -> Self {
        let prior_dist = if prior == 1.0 { None } else { Some(Gamma::new(prior, 1.0).expect("positive shape")) };
        GammaSum { prior, prior_dist }
    }

    fn sample(&self, rng: &mut SplitMix, count: u32) -> f64 {
        let mut g = match &self.prior_dist {
            None => Exp1.sample(rng),
            Some(d) => d.sample(rng),
        };
        debug_assert!(self.prior > 0.0);
        for _ in 0..count {
            let e: f64 = Exp1.sample(rng);
            g += e;
        }
        g
    }
}

/// ξ_k for every dose below the current main dose, and the resulting floor k0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorScreen {
    /// Pr(q_{k+} > q_k | data) for k < d; `None` elsewhere.
    pub xi: Vec<Option<f64>>,
    pub floor: Dose,
}

/// Monte Carlo efficacy screen from per-dose responders `v` among `n` evaluable patients.
pub fn efficacy_screen(
    v: &[u32],
    n: &[u32],
    current_dose: Dose,
    xi0: f64,
    cfg: &EfficacyScreenConfig,
) -> FloorScreen {
    let num_doses = n.len();
    let mut xi = vec![None; num_doses];
    if current_dose < 2 {
        return FloorScreen { xi, floor: 1 };
    }
    let top_k = current_dose - 1;
    // Fast path: with no evaluable patients above k, q_{k+} = 0 and ξ_k = 0.
    let any_data_above = |k: usize| n[k..].iter().any(|&x| x > 0);
    let needed: Vec<bool> = (0..num_doses).map(|i| i < top_k || n[i] > 0).collect();
    let ga = GammaSum::new(cfg.prior_a);
    let gb = GammaSum::new(cfg.prior_b);
    let mut hits = vec![0usize; top_k];
    let mut q = vec![0.0; num_doses];
    for s in 0..cfg.mc_draws {
        for i in 0..num_doses {
            if !needed[i] {
                continue;
            }
            let base = derive_seed(cfg.seed, &[i as u64, s as u64]);
            let mut ra = SplitMix(base);
            let mut rb = SplitMix(base ^ 0xA5A5_A5A5_5A5A_5A5A);
            let x = ga.sample(&mut ra, v[i]);
            let y = gb.sample(&mut rb, n[i] - v[i]);
            q[i] = x / (x + y);
        }
        // Suffix accumulation of n_i q_i and n_i over doses above k.
        let mut num = 0.0;
        let mut den = 0.0;
        for i in (0..num_doses).rev() {
            if i < top_k {
                let q_plus = if den > 0.0 { num / den } else { 0.0 };
                if q_plus > q[i] {
                    hits[i] += 1;
                }
            }
            num += n[i] as f64 * q[i];
            den += n[i] as f64;
        }
    }
    for k in 0..top_k {
        let val = if any_data_above(k + 1) { hits[k] as f64 / cfg.mc_draws as f64 } else { 0.0 };
        xi[k] = Some(val);
    }
    let floor = floor_from_xi(&xi, xi0);
    FloorScreen { xi, floor }
}

/// Floor k0 = 1 + length of the leading run of doses with ξ_k > ξ0.
pub fn floor_from_xi(xi: &[Option<f64>], xi0: f64) -> Dose {
    1 + xi.iter().take_while(|x| matches!(x, Some(v) if *v > xi0)).count()
}

/// Screen the current trial data and return the backfill floor together with the ξ values.
pub fn screen_state(state: &TrialState, cfg: &EfficacyScreenConfig) -> FloorScreen {
    let v: Vec<u32> = state.counts.iter().map(|c| c.v).collect();
    let n: Vec<u32> = state.counts.iter().map(|c| c.n_eff_evaluable).collect();
    efficacy_screen(&v, &n, state.current_main_dose, state.params.xi0, cfg)
}

/// The lowest dose admitted to backfill given the efficacy data so far.
pub fn update_backfill_floor(state: &TrialState, cfg: &EfficacyScreenConfig) -> Dose {
    screen_state(state, cfg).floor
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangePointModel {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub h: Dose,
}

impl ChangePointModel {
    pub fn linear_predictor(&self, dose: Dose) -> f64 {
        let x = dose as f64;
        let h = self.h as f64;
        if dose <= self.h {
            self.beta0 + self.beta1 * x
        } else {
            self.beta0 + self.beta1 * (self.beta2 + h)
        }
    }
}

/// Response probability at `dose`: rises linearly on the logit scale up to the
/// change point, then stays on a plateau.
pub fn model_response_rate(model: &ChangePointModel, dose: Dose) -> f64 {
    logistic(model.linear_predictor(dose))
}

/// Prior mass of the change point: `e` for untried doses, the rest split evenly over tried doses.
pub fn change_point_prior(n: &[u32], e: f64) -> Vec<f64> {
    let d = n.len() as f64;
    let tried = n.iter().filter(|&&x| x > 0).count() as f64;
    n.iter()
        .map(|&x| if x == 0 { e } else { (1.0 - (d - tried) * e) / tried })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObdPosterior {
    /// Posterior mass φ_d of the change point at each dose.
    pub phi: Vec<f64>,
    pub h_star: Dose,
    pub d_star: Option<Dose>,
    pub prior: Vec<f64>,
    /// log of the importance-sampling marginal likelihood per change point.
    pub log_marginal: Vec<f64>,
    /// Effective sample size of the importance weights per change point.
    pub ess: Vec<f64>,
    /// Variance of the mean-normalized importance weights per change point.
    pub weight_variance: Vec<f64>,
    /// Model-averaged posterior mean response rate per dose.
    pub post_mean_q: Vec<f64>,
    pub num_tried: usize,
}

#[derive(Debug, Clone, Copy)]
struct PriorDraw {
    beta0: f64,
    beta1: f64,
    beta2: f64,
}

fn prior_draws(seed: u64, draws: usize) -> Vec<PriorDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = PRIOR_VARIANCE.sqrt();
    (0..draws)
        .map(|_| {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            PriorDraw { beta0: BETA0_MEAN + sd * z0, beta1: (sd * z1).exp(), beta2: (sd * z2).exp() }
        })
        .collect()
}

/// Binomial log-likelihood of `v` responders among `n` at logit `eta`, without the coefficient.
fn binom_kernel(v: f64, n: f64, eta: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    -v * softplus(-eta) - (n - v) * softplus(eta)
}

/// Log-likelihood of the data under every change point for one parameter draw.
fn loglik_all_h(draw: &PriorDraw, v: &[u32], n: &[u32], out: &mut [f64]) {
    let d = n.len();
    let mut prefix = 0.0;
    let mut suffix_v = [0.0f64; 64];
    let mut suffix_n = [0.0f64; 64];
    assert!(d < 64, "at most 63 doses");
    for i in (0..d).rev() {
        suffix_v[i] = suffix_v[i + 1] + v[i] as f64;
        suffix_n[i] = suffix_n[i + 1] + n[i] as f64;
    }
    for h in 1..=d {
        let x = h as f64;
        prefix += binom_kernel(v[h - 1] as f64, n[h - 1] as f64, draw.beta0 + draw.beta1 * x);
        let plateau = draw.beta0 + draw.beta1 * (draw.beta2 + x);
        out[h - 1] = prefix + binom_kernel(suffix_v[h], suffix_n[h], plateau);
    }
}

/// Change-point posterior φ by self-normalized importance sampling with the prior as proposal.
pub fn fit_obd_posterior(v: &[u32], n: &[u32], params: &DesignParams, seed: u64) -> Result<ObdPosterior, EfficacyError> {
    fit_obd_posterior_with(v, n, params, seed, DEFAULT_IS_DRAWS)
}

pub fn fit_obd_posterior_with(
    v: &[u32],
    n: &[u32],
    params: &DesignParams,
    seed: u64,
    draws: usize,
) -> Result<ObdPosterior, EfficacyError> {
    assert_eq!(v.len(), n.len());
    if n.iter().all(|&x| x == 0) {
        return Err(EfficacyError::NoEfficacyData);
    }
    let d = n.len();
    let log_coef: f64 = v.iter().zip(n).map(|(&v, &n)| ln_choose(n, v)).sum();
    let samples = prior_draws(seed, draws);
    let mut ll = vec![0.0; draws * d];
    for (s, draw) in samples.iter().enumerate() {
        loglik_all_h(draw, v, n, &mut ll[s * d..(s + 1) * d]);
    }
    let prior = change_point_prior(n, params.prior_e);
    let mut log_marginal = vec![0.0; d];
    let mut ess = vec![0.0; d];
    let mut weight_variance = vec![0.0; d];
    let mut cond_mean = vec![vec![0.0; d]; d];
    let mut column = vec![0.0; draws];
    for h in 0..d {
        for s in 0..draws {
            column[s] = ll[s * d + h];
        }
        let lse = log_sum_exp(&column);
        log_marginal[h] = lse - (draws as f64).ln() + log_coef;
        let (mut sw, mut sw2) = (0.0, 0.0);
        let mut qsum = vec![0.0; d];
        for (s, draw) in samples.iter().enumerate() {
            let w = (column[s] - lse).exp();
            sw += w;
            sw2 += w * w;
            if w > 0.0 {
                let model = ChangePointModel { beta0: draw.beta0, beta1: draw.beta1, beta2: draw.beta2, h: h + 1 };
                for (dose, acc) in qsum.iter_mut().enumerate() {
                    *acc += w * model_response_rate(&model, dose + 1);
                }
            }
        }
        ess[h] = sw * sw / sw2;
        // normalized weights average 1/draws; variance of draws * w_s
        let mean = sw / draws as f64;
        weight_variance[h] = (sw2 / draws as f64 - mean * mean) * (draws as f64).powi(2);
        for (dose, acc) in qsum.iter().enumerate() {
            cond_mean[h][dose] = acc / sw;
        }
    }
    let log_post: Vec<f64> = prior
        .iter()
        .zip(&log_marginal)
        .map(|(r, l)| if *r > 0.0 { r.ln() + l } else { f64::NEG_INFINITY })
        .collect();
    let norm = log_sum_exp(&log_post);
    let phi: Vec<f64> = log_post.iter().map(|l| (l - norm).exp()).collect();
    let post_mean_q = (0..d)
        .map(|dose| (0..d).map(|h| phi[h] * cond_mean[h][dose]).sum())
        .collect();
    let num_tried = n.iter().filter(|&&x| x > 0).count();
    let h_star = argmax_lower(&phi).min(num_tried);
    Ok(ObdPosterior {
        phi,
        h_star,
        d_star: None,
        prior,
        log_marginal,
        ess,
        weight_variance,
        post_mean_q,
        num_tried,
    })
}

/// 1-based argmax; ties go to the lower dose.
fn argmax_lower(xs: &[f64]) -> Dose {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best + 1
}

/// h* = min(D', argmax φ) and d* = min(MTD, h* + 1).
pub fn select_obd(posterior: &ObdPosterior, mtd: Option<Dose>, num_tried: usize) -> Option<Dose> {
    let h_star = argmax_lower(&posterior.phi).min(num_tried);
    mtd.map(|m| m.min(h_star + 1))
}

/// Posterior report: one row per dose.
pub fn posterior_report_csv(xi: &[Option<f64>], posterior: Option<&ObdPosterior>, num_doses: usize) -> String {
    let mut out = String::from("dose,xi_k,phi_d,post_mean_q\n");
    for d in 0..num_doses {
        let xi_s = xi.get(d).copied().flatten().map(|x| x.to_string()).unwrap_or_default();
        let (phi, q) = match posterior {
            Some(p) => (p.phi[d].to_string(), p.post_mean_q[d].to_string()),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!("{},{xi_s},{phi},{q}\n", d + 1));
    }
    out
}
