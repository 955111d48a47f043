//! Instance-centric scene encoding: map tokens, agent tokens, an ego
//! token, and their fusion into instance tokens.

pub mod heads;
pub mod matching;

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::nn::attention::{AttentionStack, CrossKind, Memory};
use crate::nn::layers::Mlp;
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::scene::raster::NUM_CHANNELS;
use crate::scene::{BevGrid, PAST_FRAMES};

pub use heads::{AgentDetection, DetectionHead, MapDecode, MapHead};
pub use matching::{assignment_cost, hungarian_match};

/// Frequencies per axis of the sinusoidal cell encoding.
pub const PE_FREQS: usize = 4;
pub const PE_DIM: usize = 4 * PE_FREQS;
/// Width of a memory row: raster channels followed by the cell encoding.
pub const MEMORY_DIM: usize = NUM_CHANNELS + PE_DIM;
/// Width of the ego encoder input: past positions at frames −5..=0.
pub const EGO_INPUT_DIM: usize = 2 * (PAST_FRAMES + 1);
/// Meters per unit of the ego encoder input.
pub const EGO_INPUT_SCALE: f64 = 10.0;

/// Sinusoidal encoding of the center of cell `(row, col)`.
pub fn positional_encoding(row: usize, col: usize, height: usize, width: usize) -> [f64; PE_DIM] {
    let u = 2.0 * (col as f64 + 0.5) / width as f64 - 1.0;
    let v = 2.0 * (row as f64 + 0.5) / height as f64 - 1.0;
    let mut out = [0.0; PE_DIM];
    for f in 0..PE_FREQS {
        let w = PI * (1u32 << f) as f64;
        out[2 * f] = (w * u).sin();
        out[2 * f + 1] = (w * u).cos();
        out[2 * PE_FREQS + 2 * f] = (w * v).sin();
        out[2 * PE_FREQS + 2 * f + 1] = (w * v).cos();
    }
    out
}

/// Grid features flattened into attention memory rows, in row-major cell
/// order, at full resolution and average-pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMemory {
    pub height: usize,
    pub width: usize,
    pub full: Tensor,
    pub pool: usize,
    pub pooled: Tensor,
}

impl GridMemory {
    pub fn from_grid(grid: &BevGrid, pool: usize) -> Result<Self> {
        if pool == 0 || grid.height % pool != 0 || grid.width % pool != 0 {
            return Err(Error::config("model.map_memory_pool", "must divide the grid size"));
        }
        if grid.channels != NUM_CHANNELS {
            return Err(Error::shape(
                "grid memory",
                format!("grid has {} channels, want {NUM_CHANNELS}", grid.channels),
            ));
        }
        let full = Self::rows(grid.height, grid.width, |r, c, ch| grid.get(r, c, ch));
        let (ph, pw) = (grid.height / pool, grid.width / pool);
        let norm = 1.0 / (pool * pool) as f64;
        let pooled = Self::rows(ph, pw, |r, c, ch| {
            let mut s = 0.0;
            for dr in 0..pool {
                for dc in 0..pool {
                    s += grid.get(r * pool + dr, c * pool + dc, ch);
                }
            }
            s * norm
        });
        Ok(GridMemory {
            height: grid.height,
            width: grid.width,
            full,
            pool,
            pooled,
        })
    }

    fn rows(h: usize, w: usize, feat: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        let mut data = Vec::with_capacity(h * w * MEMORY_DIM);
        for r in 0..h {
            for c in 0..w {
                data.extend((0..NUM_CHANNELS).map(|ch| feat(r, c, ch)));
                data.extend(positional_encoding(r, c, h, w));
            }
        }
        Tensor::matrix(h * w, MEMORY_DIM, data)
    }

    pub fn pooled_dims(&self) -> (usize, usize) {
        (self.height / self.pool, self.width / self.pool)
    }
}

/// Self-attention mask over `[ego, agent_1, …, agent_n]` hiding the ego
/// key from every agent query. `true` hides.
pub fn ego_agent_mask(num_agents: usize) -> Vec<bool> {
    let n = num_agents + 1;
    let mut m = vec![false; n * n];
    for i in 1..n {
        m[i * n] = true;
    }
    m
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub cfg: ModelConfig,
    pub map_stack: AttentionStack,
    pub agent_stack: AttentionStack,
    pub ego_encoder: Mlp,
    pub fuse_stack: AttentionStack,
    pub inject_stack: AttentionStack,
}

impl Tokenizer {
    pub const MAP_QUERIES: &'static str = "map.queries";
    pub const AGENT_QUERIES: &'static str = "agent.queries";
    pub const AGENT_REF_LOGITS: &'static str = "agent.ref_logits";

    pub fn new(cfg: &ModelConfig) -> Self {
        let a = cfg.attention;
        let d = a.model_dim;
        Tokenizer {
            cfg: cfg.clone(),
            map_stack: AttentionStack::new("map.enc", a, true, CrossKind::Dense { mem_dim: MEMORY_DIM }),
            agent_stack: AttentionStack::new("agent.enc", a, true, CrossKind::Deformable { mem_dim: MEMORY_DIM }),
            ego_encoder: Mlp::new("ego.enc", &[EGO_INPUT_DIM, cfg.ego_hidden, d]),
            fuse_stack: AttentionStack::new("fuse", a, true, CrossKind::None),
            inject_stack: AttentionStack::new("inject", a, false, CrossKind::Dense { mem_dim: d }),
        }
    }

    /// Agent reference points start on a regular lattice over the grid.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let d = self.cfg.attention.model_dim;
        let (nm, na) = (self.cfg.num_map_tokens, self.cfg.num_agent_slots);
        store.init_uniform(Self::MAP_QUERIES, &[nm, d], 1, rng)?;
        store.init_uniform(Self::AGENT_QUERIES, &[na, d], 1, rng)?;
        let k = (na as f64).sqrt().ceil() as usize;
        let refs = (0..na)
            .flat_map(|i| {
                let u = ((i % k) as f64 + 0.5) / k as f64;
                let v = ((i / k) as f64 + 0.5) / k as f64;
                [logit(u), logit(v)]
            })
            .collect();
        store.insert(Self::AGENT_REF_LOGITS, Tensor::matrix(na, 2, refs))?;
        self.map_stack.init(store, rng)?;
        self.agent_stack.init(store, rng)?;
        self.ego_encoder.init(store, rng)?;
        self.fuse_stack.init(store, rng)?;
        self.inject_stack.init(store, rng)
    }

    /// Learned map queries cross-attending to the pooled grid memory.
    pub fn encode_map_tokens(&self, g: &mut Graph, mem: &GridMemory) -> Result<Var> {
        let q = g.param(Self::MAP_QUERIES);
        let m = g.constant_tensor(&mem.pooled);
        Ok(self.map_stack.forward(g, q, &Memory::Dense(m), None)?.tokens())
    }

    /// Learned agent queries sampling the full-resolution grid around
    /// learned reference points.
    pub fn encode_agent_tokens(&self, g: &mut Graph, mem: &GridMemory) -> Result<Var> {
        let q = g.param(Self::AGENT_QUERIES);
        let rl = g.param(Self::AGENT_REF_LOGITS);
        let refs = g.sigmoid(rl);
        let m = g.constant_tensor(&mem.full);
        let memory = Memory::Grid {
            memory: m,
            height: mem.height,
            width: mem.width,
            refs,
        };
        Ok(self.agent_stack.forward(g, q, &memory, None)?.tokens())
    }

    /// Ego token from the ego past in the ego frame, frames −5..=0.
    pub fn encode_ego(&self, g: &mut Graph, past: &[Point]) -> Result<Var> {
        if past.len() != PAST_FRAMES + 1 {
            return Err(Error::shape(
                "ego.enc",
                format!("expected {} past positions, got {}", PAST_FRAMES + 1, past.len()),
            ));
        }
        let x: Vec<f64> = past
            .iter()
            .flat_map(|p| [p[0] / EGO_INPUT_SCALE, p[1] / EGO_INPUT_SCALE])
            .collect();
        let x = g.constant(1, EGO_INPUT_DIM, x);
        self.ego_encoder.forward(g, x)
    }

    /// Self-attention over `[ego; agents]`. Row 0 of the result is the ego.
    pub fn fuse_instances(&self, g: &mut Graph, ego: Var, agents: Var, mask_ego_agent: bool) -> Result<Var> {
        let x = g.concat_rows(&[ego, agents]);
        let n = g.dims(agents).0;
        let mask = mask_ego_agent.then(|| ego_agent_mask(n));
        Ok(self.fuse_stack.forward(g, x, &Memory::None, mask.as_deref())?.tokens())
    }

    /// Instance tokens cross-attending to map tokens.
    pub fn inject_map(&self, g: &mut Graph, instances: Var, map_tokens: Var) -> Result<Var> {
        Ok(self
            .inject_stack
            .forward(g, instances, &Memory::Dense(map_tokens), None)?
            .tokens())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose2;
    use crate::scene::GridConfig;

    #[test]
    fn encoding_is_bounded_and_distinct() {
        let a = positional_encoding(0, 0, 32, 32);
        let b = positional_encoding(0, 1, 32, 32);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
        assert_eq!(a[8..], b[8..]);
    }

    #[test]
    fn pooling_averages_blocks() {
        let cfg = GridConfig {
            height: 4,
            width: 4,
            extent: 8.0,
        };
        let mut grid = BevGrid::zeros(&cfg, Pose2::identity());
        let i = grid.index(1, 1, 0);
        grid.features[i] = 4.0;
        let mem = GridMemory::from_grid(&grid, 2).unwrap();
        assert_eq!(mem.pooled.shape(), &[4, MEMORY_DIM]);
        assert_eq!(mem.pooled.data()[0], 1.0);
        assert_eq!(mem.full.data()[(4 + 1) * MEMORY_DIM], 4.0);
        assert!(GridMemory::from_grid(&grid, 3).is_err());
    }

    #[test]
    fn mask_isolates_ego() {
        let m = ego_agent_mask(2);
        #[rustfmt::skip]
        let want = vec![
            false, false, false,
            true, false, false,
            true, false, false,
        ];
        assert_eq!(m, want);
    }
}
