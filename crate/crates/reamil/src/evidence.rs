//! Tile selection head and stochastic gates.
//!
//! A small MLP scores each tile token with a selection logit `a_i`. During
//! training the logit is pushed through a binary Concrete relaxation:
//! `z = sigmoid((a + log(eps) - log(1 - eps)) / T)` with `eps ~ U(0, 1)`,
//! one draw per tile per step, shared between the keep view and the drop
//! view so that `keep + drop` covers each tile exactly once. At evaluation
//! the noise is dropped and `z = sigmoid(a / T)`.
//!
//! Gates multiply raw tile features (and the positional term) before the
//! shared projection, so the complementary views live in the same token
//! space as the ungated bag.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::ModelError;
use crate::params::{ParamSet, TapeBinding};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Array, Scalar};

/// Uniform noise is clamped away from 0 and 1 so its logit stays finite.
const NOISE_FLOOR: f64 = 1e-6;

/// Fresh gates open at roughly `sigmoid(2)`: the warm-started keep view
/// then starts out close to the full bag (preserving baseline behavior)
/// and training *prunes* background tiles, instead of starting from
/// half-closed noise where the budget term can collapse every gate before
/// the selector has learned which tiles matter — a collapse that is hard
/// to escape once annealing has shrunk the sigmoid's active region.
pub const OPEN_GATE_BIAS: f32 = 0.0;

/// Fresh selection-head weights, sized from the token width. Hidden layer
/// is half the token width with a GELU in between.
pub fn init_evidence_params(d_model: usize, rng: &mut ChaCha8Rng) -> ParamSet<f32> {
    assert!(d_model >= 2, "token width too small for the selection head");
    let hidden = d_model / 2;
    let scale = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let mut p = ParamSet::new();
    let s1 = scale(d_model);
    p.insert(
        "sel.w1",
        Array::from_fn([d_model, hidden], |_| ((rng.gen::<f64>() * 2.0 - 1.0) * s1) as f32),
    );
    p.insert("sel.b1", Array::zeros([hidden]));
    let s2 = scale(hidden);
    p.insert(
        "sel.w2",
        Array::from_fn([hidden, 1], |_| ((rng.gen::<f64>() * 2.0 - 1.0) * s2) as f32),
    );
    p.insert("sel.b2", Array::from_vec([1], vec![OPEN_GATE_BIAS]));
    p
}

/// Per-tile selection logits from `(N, d_model)` ungated tile tokens.
/// Returns a rank-1 `(N)` node.
pub fn select_logits<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &TapeBinding,
    tokens: NodeId,
) -> Result<NodeId, ModelError> {
    let n = tape.value(tokens).shape()[0];
    if n == 0 {
        return Err(ModelError::EmptyBag);
    }
    let h = tape.matmul(tokens, bind.id("sel.w1"))?;
    let h = tape.add_rowvec(h, bind.id("sel.b1"))?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, bind.id("sel.w2"))?;
    let h = tape.add_rowvec(h, bind.id("sel.b2"))?;
    Ok(tape.reshape(h, [n])?)
}

/// How gate noise is produced.
pub enum GateMode<'a> {
    /// Fresh uniform noise from the supplied stream, one draw per tile.
    Train(&'a mut ChaCha8Rng),
    /// No noise: `z = sigmoid(a / T)`.
    Eval,
    /// Replay previously drawn noise logits (for finite-difference checks
    /// and tests that need the stochastic path held fixed).
    FrozenNoise(&'a Array<f64>),
}

/// Gate values plus everything needed to reproduce or invert them.
#[derive(Debug)]
pub struct SelectionOutput {
    /// Node of the rank-1 `(N)` gate vector on the tape.
    pub gates: NodeId,
    /// Noise logits `log(eps) - log(1 - eps)` actually used, one per tile.
    /// Empty in eval mode.
    pub noise_logits: Vec<f64>,
}

/// Applies the binary Concrete relaxation to selection logits.
pub fn concrete_gate<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    temperature: f64,
    mode: GateMode,
) -> Result<SelectionOutput, ModelError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(ModelError::BadTemperature(temperature));
    }
    let n = tape.value(logits).numel();
    let inv_t = T::from_f64(1.0 / temperature);
    let (pre, noise_logits) = match mode {
        GateMode::Eval => (logits, Vec::new()),
        GateMode::Train(rng) => {
            let noise: Vec<f64> = (0..n)
                .map(|_| {
                    let eps = rng.gen::<f64>().clamp(NOISE_FLOOR, 1.0 - NOISE_FLOOR);
                    eps.ln() - (1.0 - eps).ln()
                })
                .collect();
            let u = tape.constant(Array::from_vec([n], noise.iter().map(|&v| T::from_f64(v)).collect()));
            (tape.add(logits, u)?, noise)
        }
        GateMode::FrozenNoise(noise) => {
            assert_eq!(noise.numel(), n, "noise length must match tile count");
            let vals = noise.data().to_vec();
            let u = tape.constant(Array::from_vec([n], vals.iter().map(|&v| T::from_f64(v)).collect()));
            (tape.add(logits, u)?, vals)
        }
    };
    let scaled = tape.scale_const(pre, inv_t)?;
    let gates = tape.sigmoid(scaled)?;
    Ok(SelectionOutput { gates, noise_logits })
}

/// The complement `1 - z`, built so that keep and drop gates sum to one
/// per tile exactly in floating point.
pub fn complement_gate<T: Scalar>(tape: &mut Tape<T>, gates: NodeId) -> Result<NodeId, ModelError> {
    let n = tape.value(gates).numel();
    let ones = tape.constant(Array::full([n], T::one()));
    Ok(tape.sub(ones, gates)?)
}

/// Tiles sorted by selection logit, highest first, ties broken by index.
/// The returned vector holds tile indices.
pub fn rank_tiles(logits: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .expect("selection logits must not be NaN")
            .then(a.cmp(&b))
    });
    order
}

/// A hard top-K mask over tiles: 1.0 for the K highest-logit tiles, 0.0
/// elsewhere. `k` is clamped to the tile count.
pub fn top_k_mask(logits: &[f64], k: usize) -> Vec<f32> {
    let order = rank_tiles(logits);
    let mut mask = vec![0.0f32; logits.len()];
    for &i in order.iter().take(k.min(logits.len())) {
        mask[i] = 1.0;
    }
    mask
}
