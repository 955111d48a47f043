//! Latent trajectory prior and step-wise latent rollout.
//!
//! Futures are encoded into a diagonal Gaussian over a latent space, either
//! from the ground-truth trajectory plus instance context (training only)
//! or from the instance token alone. A latent state is rolled forward by a
//! GRU, one step per future frame, and each state decodes one displacement.
//!
//! Trajectories are batched as `[B × 2f]` rows `x₁, y₁, …, x_f, y_f`, each
//! in its instance's frame-0 pose frame.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ModelConfig, SampleMode, Variant};
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::nn::layers::{GruCell, Mlp};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::scene::AgentClass;

/// Meters per unit of the future-encoder trajectory input.
pub const FUTURE_INPUT_SCALE: f64 = 10.0;

/// Batched diagonal Gaussians: `mu` and `log_sigma` are both `[B × Z]`.
#[derive(Debug, Clone, Copy)]
pub struct LatentGaussian {
    pub mu: Var,
    pub log_sigma: Var,
}

impl LatentGaussian {
    pub fn batch(&self, g: &Graph) -> usize {
        g.dims(self.mu).0
    }
}

/// `Σ_d ½[(r − 1 − ln r) + (μ_q − μ_p)²/σ_p²]` with `r = σ_q²/σ_p²`. The
/// first part is clamped at zero so rounding never yields a negative KL.
pub fn kl_diag_gauss_value(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64> {
    let n = mu_q.len();
    if sigma_q.len() != n || mu_p.len() != n || sigma_p.len() != n {
        return Err(Error::shape("kl_diag_gauss", "dimension mismatch"));
    }
    Ok((0..n)
        .map(|d| {
            let dm = mu_q[d] - mu_p[d];
            let two_d = 2.0 * (sigma_q[d].ln() - sigma_p[d].ln());
            0.5 * (two_d.exp() - 1.0 - two_d).max(0.0) + 0.5 * dm * dm / (sigma_p[d] * sigma_p[d])
        })
        .sum())
}

/// Per-row `KL(q ‖ p)` as a `[B × 1]` node.
pub fn kl_diag_gauss(g: &mut Graph, q: &LatentGaussian, p: &LatentGaussian) -> Result<Var> {
    if g.dims(q.mu) != g.dims(p.mu) || g.dims(q.log_sigma) != g.dims(q.mu) || g.dims(p.log_sigma) != g.dims(p.mu) {
        return Err(Error::shape(
            "kl_diag_gauss",
            format!("q {:?} vs p {:?}", g.dims(q.mu), g.dims(p.mu)),
        ));
    }
    let d = g.sub(q.log_sigma, p.log_sigma);
    let two_d = g.scale(d, 2.0);
    let r = g.exp(two_d);
    let r_minus = g.add_scalar(r, -1.0);
    let shape = g.sub(r_minus, two_d);
    let shape = g.relu(shape);
    let dm = g.sub(q.mu, p.mu);
    let dm2 = g.square(dm);
    let neg_two_lp = g.scale(p.log_sigma, -2.0);
    let inv_var_p = g.exp(neg_two_lp);
    let loc = g.mul(dm2, inv_var_p);
    let sum = g.add(shape, loc);
    let terms = g.scale(sum, 0.5);
    Ok(g.row_sums(terms))
}

/// Reparameterized draw `z = μ + σ⊙ε`, or `z = μ` in mean mode.
pub fn sample_latent(g: &mut Graph, lg: &LatentGaussian, mode: SampleMode, rng: &mut ChaCha8Rng) -> Var {
    match mode {
        SampleMode::Mean => lg.mu,
        SampleMode::Sample => {
            let (b, z) = g.dims(lg.mu);
            let eps: Vec<f64> = (0..b * z).map(|_| rng.sample(StandardNormal)).collect();
            let eps = g.constant(b, z, eps);
            let sigma = g.exp(lg.log_sigma);
            let noise = g.mul(sigma, eps);
            g.add(lg.mu, noise)
        }
    }
}

/// Constant `[2f × 2f]` matrix turning per-step displacements into
/// positions by right multiplication.
fn cumulative_matrix(horizon: usize) -> Tensor {
    let n = 2 * horizon;
    let mut c = vec![0.0; n * n];
    for i in 0..horizon {
        for k in i..horizon {
            for axis in 0..2 {
                c[(2 * i + axis) * n + 2 * k + axis] = 1.0;
            }
        }
    }
    Tensor::matrix(n, n, c)
}

#[derive(Debug, Clone)]
pub struct Prior {
    pub latent_dim: usize,
    pub horizon: usize,
    pub displacement_scale: f64,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
    pub future_enc: Mlp,
    pub instance_enc: Mlp,
    pub gru: GruCell,
    pub waypoint_dec: Mlp,
    pub class_dec: Mlp,
    pub traj_dec: Mlp,
    pub direct_traj: Mlp,
    pub direct_class: Mlp,
}

impl Prior {
    pub const GRU_INPUT: &'static str = "prior.gru_input";

    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, z, f) = (cfg.attention.model_dim, cfg.latent_dim, cfg.horizon);
        Prior {
            latent_dim: z,
            horizon: f,
            displacement_scale: cfg.displacement_scale,
            log_sigma_min: cfg.log_sigma_min,
            log_sigma_max: cfg.log_sigma_max,
            future_enc: Mlp::new("prior.future_enc", &[2 * f + d, cfg.encoder_hidden, 2 * z]),
            instance_enc: Mlp::new("prior.instance_enc", &[d, cfg.encoder_hidden, 2 * z]),
            gru: GruCell::new("prior.gru", cfg.gru_input, cfg.gru_hidden),
            waypoint_dec: Mlp::new("prior.waypoint_dec", &[z, cfg.decoder_hidden, 2]),
            class_dec: Mlp::new("prior.class_dec", &[z, cfg.decoder_hidden, AgentClass::COUNT]),
            traj_dec: Mlp::new("prior.traj_dec", &[z, cfg.encoder_hidden, 2 * f]),
            direct_traj: Mlp::new("prior.direct_traj", &[d, cfg.encoder_hidden, 2 * f]),
            direct_class: Mlp::new("prior.direct_class", &[d, cfg.decoder_hidden, AgentClass::COUNT]),
        }
    }

    /// Initializes only the components the variant uses.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, variant: Variant) -> Result<()> {
        if variant == Variant::Neither {
            self.direct_traj.init(store, rng)?;
            return self.direct_class.init(store, rng);
        }
        if variant.uses_prior() {
            self.future_enc.init(store, rng)?;
        }
        self.instance_enc.init(store, rng)?;
        self.class_dec.init(store, rng)?;
        if variant.uses_rollout() {
            store.init_uniform(Self::GRU_INPUT, &[1, self.gru.input], 1, rng)?;
            self.gru.init(store, rng)?;
            self.waypoint_dec.init(store, rng)
        } else {
            self.traj_dec.init(store, rng)
        }
    }

    fn gaussian(&self, g: &mut Graph, out: Var) -> LatentGaussian {
        let z = self.latent_dim;
        let mu = g.slice_cols(out, 0, z);
        let raw = g.slice_cols(out, z, z);
        let log_sigma = g.clamp(raw, self.log_sigma_min, self.log_sigma_max);
        LatentGaussian { mu, log_sigma }
    }

    /// Ground-truth-conditioned distribution from each future (in its
    /// instance frame, frames 1..=f) and the matching context token row.
    pub fn encode_future(&self, g: &mut Graph, futures: &[Vec<Point>], context: Var) -> Result<LatentGaussian> {
        let (b, _) = g.dims(context);
        if futures.len() != b {
            return Err(Error::shape(
                "prior.future_enc",
                format!("{} futures for {b} context rows", futures.len()),
            ));
        }
        if let Some(bad) = futures.iter().find(|f| f.len() != self.horizon) {
            return Err(Error::Input(format!(
                "future has {} waypoints, horizon is {}",
                bad.len(),
                self.horizon
            )));
        }
        let x: Vec<f64> = futures
            .iter()
            .flatten()
            .flat_map(|p| [p[0] / FUTURE_INPUT_SCALE, p[1] / FUTURE_INPUT_SCALE])
            .collect();
        let x = g.constant(b, 2 * self.horizon, x);
        let input = g.concat_cols(&[x, context]);
        let out = self.future_enc.forward(g, input)?;
        Ok(self.gaussian(g, out))
    }

    pub fn encode_instance(&self, g: &mut Graph, tokens: Var) -> Result<LatentGaussian> {
        let out = self.instance_enc.forward(g, tokens)?;
        Ok(self.gaussian(g, out))
    }

    /// `f` GRU steps from `z0: [B × Z]` driven by a learned constant input.
    pub fn rollout(&self, g: &mut Graph, z0: Var, f: usize) -> Result<Vec<Var>> {
        if f == 0 {
            return Err(Error::Input("rollout horizon must be at least 1".into()));
        }
        let x = g.param(Self::GRU_INPUT);
        let mut h = z0;
        let mut states = Vec::with_capacity(f);
        for _ in 0..f {
            h = self.gru.step(g, x, h)?;
            states.push(h);
        }
        Ok(states)
    }

    fn cumulate(&self, g: &mut Graph, disp: Var) -> Var {
        let n = g.dims(disp).1 / 2;
        let scaled = g.scale(disp, self.displacement_scale);
        let c = g.constant_tensor(&cumulative_matrix(n));
        g.matmul(scaled, c)
    }

    /// One displacement per state, accumulated from the origin: `[B × 2f]`.
    pub fn decode_waypoints(&self, g: &mut Graph, states: &[Var]) -> Result<Var> {
        if states.is_empty() {
            return Err(Error::Input("no latent states to decode".into()));
        }
        let mut disp = Vec::with_capacity(states.len());
        for &s in states {
            disp.push(self.waypoint_dec.forward(g, s)?);
        }
        let cat = g.concat_cols(&disp);
        Ok(self.cumulate(g, cat))
    }

    pub fn decode_class(&self, g: &mut Graph, z0: Var) -> Result<Var> {
        self.class_dec.forward(g, z0)
    }

    /// Whole-trajectory decoding of all `f` displacements from `z0` at once.
    pub fn decode_whole(&self, g: &mut Graph, z0: Var) -> Result<Var> {
        let d = self.traj_dec.forward(g, z0)?;
        Ok(self.cumulate(g, d))
    }

    /// Trajectory and class logits straight from instance tokens.
    pub fn decode_direct(&self, g: &mut Graph, tokens: Var) -> Result<(Var, Var)> {
        let d = self.direct_traj.forward(g, tokens)?;
        let traj = self.cumulate(g, d);
        let cls = self.direct_class.forward(g, tokens)?;
        Ok((traj, cls))
    }

    /// Trajectories `[B × 2f]` and class logits `[B × classes]` from latent
    /// states, using the rollout or the whole-trajectory decoder.
    pub fn generate(&self, g: &mut Graph, z0: Var, variant: Variant) -> Result<(Var, Var)> {
        let traj = if variant.uses_rollout() {
            let states = self.rollout(g, z0, self.horizon)?;
            self.decode_waypoints(g, &states)?
        } else {
            self.decode_whole(g, z0)?
        };
        let cls = self.decode_class(g, z0)?;
        Ok((traj, cls))
    }
}

/// Splits a `[B × 2f]` trajectory node value into per-instance waypoints.
pub fn trajectories_of(values: &[f64], horizon: usize) -> Vec<Vec<Point>> {
    values
        .chunks(2 * horizon)
        .map(|row| row.chunks(2).map(|p| [p[0], p[1]]).collect())
        .collect()
}
