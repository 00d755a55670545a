//! Tile tokenizer, transformer encoder, and bag classifier.
//!
//! Tiles become tokens via a linear feature projection plus, optionally, a
//! small MLP on per-bag normalized coordinates. A learned CLS token is
//! prepended and the sequence runs through pre-norm transformer layers with
//! exact softmax attention. Attention keys and values come from tile rows
//! only: the CLS token reads the bag without ever being read, and tiles
//! attend among themselves. That structure keeps two properties exact that
//! bag classifiers should have: tile order cannot matter, and duplicating
//! an identical tile is equivalent to re-weighting, not new information
//! (attention over identical keys is plain averaging).
//!
//! Gating plugs in at tokenization: a gate vector scales raw features and
//! the positional term per tile, before the shared projection, so a fully
//! closed gate erases the tile's content and its location.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::params::{ParamSet, TapeBinding};
use crate::tape::{AutodiffError, NodeId, Tape};
use crate::tensor::{Array, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Input feature dimension per tile.
    pub d_in: usize,
    /// Token width.
    pub d_model: usize,
    /// Attention heads per layer; must divide `d_model`.
    pub heads: usize,
    /// Transformer layers.
    pub layers: usize,
    pub num_classes: usize,
    /// Add the coordinate MLP term to tile tokens.
    pub use_positional: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_in: 64,
            d_model: 32,
            heads: 2,
            layers: 1,
            num_classes: 2,
            use_positional: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |what: String| Err(ModelError::Config(what));
        if self.d_in == 0 || self.d_model == 0 || self.layers == 0 {
            return fail("d_in, d_model, and layers must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "heads ({}) must be positive and divide d_model ({})",
                self.heads, self.d_model
            ));
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("bag has no tiles")]
    EmptyBag,
    #[error("non-finite activations after transformer layer {layer}")]
    NonFinite { layer: usize },
    #[error("gate temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: [usize; 2], fan_in: usize) -> Array<T> {
    let s = 1.0 / (fan_in as f64).sqrt();
    Array::from_fn(shape.to_vec(), |_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * s))
}

/// Fresh backbone weights: matrices uniform in +-1/sqrt(fan_in), biases
/// zero, layer-norm gains one, CLS token small uniform noise. Insertion
/// order fixes the checkpoint and optimizer ordering.
pub fn init_backbone_params(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> ParamSet<f32> {
    let d = cfg.d_model;
    let mut p = ParamSet::new();
    p.insert("embed.w_feat", uniform::<f32>(rng, [cfg.d_in, d], cfg.d_in));
    p.insert("embed.b_feat", Array::zeros([d]));
    // Small noise rather than zeros: an all-equal row entering layer norm
    // sits at a near-singular point (variance ~ 0) with extreme curvature.
    p.insert(
        "embed.cls",
        Array::from_fn([d], |_| (rng.gen::<f32>() * 2.0 - 1.0) * 0.1),
    );
    if cfg.use_positional {
        p.insert("pos.w1", uniform::<f32>(rng, [2, d], 2));
        p.insert("pos.b1", Array::zeros([d]));
        p.insert("pos.w2", uniform::<f32>(rng, [d, d], d));
        p.insert("pos.b2", Array::zeros([d]));
    }
    let dh = cfg.head_dim();
    let dff = cfg.ffn_dim();
    for l in 0..cfg.layers {
        p.insert(format!("layer{l}.ln1.gain"), Array::full([d], 1.0));
        p.insert(format!("layer{l}.ln1.bias"), Array::zeros([d]));
        for h in 0..cfg.heads {
            p.insert(format!("layer{l}.head{h}.wq"), uniform::<f32>(rng, [d, dh], d));
            p.insert(format!("layer{l}.head{h}.wk"), uniform::<f32>(rng, [d, dh], d));
            p.insert(format!("layer{l}.head{h}.wv"), uniform::<f32>(rng, [d, dh], d));
            p.insert(format!("layer{l}.head{h}.wo"), uniform::<f32>(rng, [dh, d], dh));
        }
        p.insert(format!("layer{l}.attn.bias"), Array::zeros([d]));
        p.insert(format!("layer{l}.ln2.gain"), Array::full([d], 1.0));
        p.insert(format!("layer{l}.ln2.bias"), Array::zeros([d]));
        p.insert(format!("layer{l}.ffn.w1"), uniform::<f32>(rng, [d, dff], d));
        p.insert(format!("layer{l}.ffn.b1"), Array::zeros([dff]));
        p.insert(format!("layer{l}.ffn.w2"), uniform::<f32>(rng, [dff, d], dff));
        p.insert(format!("layer{l}.ffn.b2"), Array::zeros([d]));
    }
    p.insert("final_ln.gain", Array::full([d], 1.0));
    p.insert("final_ln.bias", Array::zeros([d]));
    p.insert("head.w_cls", uniform::<f32>(rng, [d, cfg.num_classes], d));
    p.insert("head.b_cls", Array::zeros([cfg.num_classes]));
    p
}

/// Per-bag min-max normalization of `(N, 2)` coordinates into the unit
/// square. A degenerate axis (all tiles share the value) maps to 0.5, so a
/// single-tile bag sits at the square's center.
pub fn normalize_coords<T: Scalar>(coords: &Array<T>) -> Array<T> {
    assert_eq!(coords.rank(), 2);
    assert_eq!(coords.shape()[1], 2);
    let n = coords.shape()[0];
    let mut out = vec![T::zero(); n * 2];
    let half = T::from_f64(0.5);
    for axis in 0..2 {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for i in 0..n {
            let v = coords.get2(i, axis);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        for i in 0..n {
            out[i * 2 + axis] = if range > T::zero() {
                (coords.get2(i, axis) - lo) / range
            } else {
                half
            };
        }
    }
    Array::from_vec([n, 2], out)
}

/// Coordinate MLP: `(N, 2)` normalized coordinates to `(N, d_model)`.
pub fn positional_term<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &TapeBinding,
    norm_coords: NodeId,
) -> Result<NodeId, ModelError> {
    let h = tape.matmul(norm_coords, bind.id("pos.w1"))?;
    let h = tape.add_rowvec(h, bind.id("pos.b1"))?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, bind.id("pos.w2"))?;
    Ok(tape.add_rowvec(h, bind.id("pos.b2"))?)
}

/// Builds `(N, d_model)` tile tokens: gated features through the shared
/// projection, plus the gated positional term when one is supplied.
pub fn tokenize<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &TapeBinding,
    features: NodeId,
    pos: Option<NodeId>,
    gate: Option<NodeId>,
) -> Result<NodeId, ModelError> {
    if tape.value(features).shape()[0] == 0 {
        return Err(ModelError::EmptyBag);
    }
    let feats = match gate {
        Some(g) => tape.broadcast_scale(g, features)?,
        None => features,
    };
    let proj = tape.matmul(feats, bind.id("embed.w_feat"))?;
    let mut tokens = tape.add_rowvec(proj, bind.id("embed.b_feat"))?;
    if let Some(pos) = pos {
        let p = match gate {
            Some(g) => tape.broadcast_scale(g, pos)?,
            None => pos,
        };
        tokens = tape.add(tokens, p)?;
    }
    Ok(tokens)
}

/// Runs the encoder over `(N, d_model)` tile tokens and returns the CLS
/// representation as `(1, d_model)`. Activations are checked for
/// finiteness after every layer.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &TapeBinding,
    cfg: &BackboneConfig,
    tokens: NodeId,
) -> Result<NodeId, ModelError> {
    let n = tape.value(tokens).shape()[0];
    if n == 0 {
        return Err(ModelError::EmptyBag);
    }
    let cls = tape.reshape(bind.id("embed.cls"), [1, cfg.d_model])?;
    let mut seq = tape.concat_rows(&[cls, tokens])?;
    let scale = T::from_f64(1.0 / (cfg.head_dim() as f64).sqrt());
    for l in 0..cfg.layers {
        let xn = tape.layer_norm(
            seq,
            bind.id(&format!("layer{l}.ln1.gain")),
            bind.id(&format!("layer{l}.ln1.bias")),
        )?;
        // Keys and values from tile rows only; every row queries them.
        let kv_src = tape.slice_rows(xn, 1, n)?;
        let mut head_sum: Option<NodeId> = None;
        for h in 0..cfg.heads {
            let q = tape.matmul(xn, bind.id(&format!("layer{l}.head{h}.wq")))?;
            let k = tape.matmul(kv_src, bind.id(&format!("layer{l}.head{h}.wk")))?;
            let v = tape.matmul(kv_src, bind.id(&format!("layer{l}.head{h}.wv")))?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scale_const(scores, scale)?;
            let attn = tape.softmax(scaled, 1)?;
            let ctx = tape.matmul(attn, v)?;
            let proj = tape.matmul(ctx, bind.id(&format!("layer{l}.head{h}.wo")))?;
            head_sum = Some(match head_sum {
                Some(acc) => tape.add(acc, proj)?,
                None => proj,
            });
        }
        let attn_out = tape.add_rowvec(head_sum.unwrap(), bind.id(&format!("layer{l}.attn.bias")))?;
        seq = tape.add(seq, attn_out)?;

        let xn2 = tape.layer_norm(
            seq,
            bind.id(&format!("layer{l}.ln2.gain")),
            bind.id(&format!("layer{l}.ln2.bias")),
        )?;
        let ff = tape.matmul(xn2, bind.id(&format!("layer{l}.ffn.w1")))?;
        let ff = tape.add_rowvec(ff, bind.id(&format!("layer{l}.ffn.b1")))?;
        let ff = tape.gelu(ff)?;
        let ff = tape.matmul(ff, bind.id(&format!("layer{l}.ffn.w2")))?;
        let ff = tape.add_rowvec(ff, bind.id(&format!("layer{l}.ffn.b2")))?;
        seq = tape.add(seq, ff)?;

        if !tape.value(seq).all_finite() {
            return Err(ModelError::NonFinite { layer: l });
        }
    }
    let normed = tape.layer_norm(seq, bind.id("final_ln.gain"), bind.id("final_ln.bias"))?;
    Ok(tape.slice_rows(normed, 0, 1)?)
}

/// Class logits from the CLS representation, as a rank-1 `(C)` vector.
pub fn classify<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &TapeBinding,
    cfg: &BackboneConfig,
    h_cls: NodeId,
) -> Result<NodeId, ModelError> {
    let logits = tape.matmul(h_cls, bind.id("head.w_cls"))?;
    let logits = tape.add_rowvec(logits, bind.id("head.b_cls"))?;
    Ok(tape.reshape(logits, [cfg.num_classes])?)
}

/// Full-view forward: features plus coordinates to class logits.
/// Convenience wrapper used by evaluation paths and tests.
pub fn forward_full<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &TapeBinding,
    cfg: &BackboneConfig,
    features: &Array<T>,
    coords: &Array<T>,
) -> Result<NodeId, ModelError> {
    let feats = tape.constant(features.clone());
    let pos = if cfg.use_positional {
        let nc = tape.constant(normalize_coords(coords));
        Some(positional_term(tape, bind, nc)?)
    } else {
        None
    };
    let tokens = tokenize(tape, bind, feats, pos, None)?;
    let h = encode(tape, bind, cfg, tokens)?;
    classify(tape, bind, cfg, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derived_rng;

    fn toy_cfg() -> BackboneConfig {
        BackboneConfig {
            d_in: 8,
            d_model: 16,
            heads: 2,
            layers: 2,
            num_classes: 3,
            use_positional: true,
        }
    }

    fn random_bag(n: usize, d: usize, salt: u64) -> (Array<f32>, Array<f32>) {
        let mut rng = derived_rng(salt, "test-bag", 0);
        let feats = Array::from_fn([n, d], |_| rng.gen::<f32>() * 2.0 - 1.0);
        let coords = Array::from_fn([n, 2], |_| rng.gen::<f32>() * 900.0);
        (feats, coords)
    }

    fn logits_for(cfg: &BackboneConfig, params: &ParamSet<f32>, feats: &Array<f32>, coords: &Array<f32>) -> Vec<f32> {
        let mut tape = Tape::inference();
        let bind = TapeBinding::bind(&mut tape, params);
        let out = forward_full(&mut tape, &bind, cfg, feats, coords).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn config_validation_catches_bad_head_split() {
        let mut cfg = toy_cfg();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 2;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn shapes_are_as_documented() {
        let cfg = toy_cfg();
        let mut rng = derived_rng(1, "init", 0);
        let params = init_backbone_params(&cfg, &mut rng);
        let (feats, coords) = random_bag(5, 8, 2);
        let mut tape = Tape::<f32>::new();
        let bind = TapeBinding::bind(&mut tape, &params);
        let f = tape.constant(feats);
        let nc = normalize_coords(&coords);
        let ncn = tape.constant(nc);
        let pos = positional_term(&mut tape, &bind, ncn).unwrap();
        assert_eq!(tape.value(pos).shape(), &[5, 16]);
        let tokens = tokenize(&mut tape, &bind, f, Some(pos), None).unwrap();
        assert_eq!(tape.value(tokens).shape(), &[5, 16]);
        let h = encode(&mut tape, &bind, &cfg, tokens).unwrap();
        assert_eq!(tape.value(h).shape(), &[1, 16]);
        let logits = classify(&mut tape, &bind, &cfg, h).unwrap();
        assert_eq!(tape.value(logits).shape(), &[3]);
    }

    #[test]
    fn single_tile_coords_normalize_to_center() {
        let c = normalize_coords(&Array::from_vec([1, 2], vec![473.2f32, 88.0]));
        assert_eq!(c.data(), &[0.5, 0.5]);
    }

    #[test]
    fn degenerate_axis_normalizes_to_half() {
        let c = normalize_coords(&Array::from_vec([2, 2], vec![10.0f32, 7.0, 30.0, 7.0]));
        assert_eq!(c.data(), &[0.0, 0.5, 1.0, 0.5]);
    }

    #[test]
    fn permutation_invariance_without_positional() {
        let mut cfg = toy_cfg();
        cfg.use_positional = false;
        let mut rng = derived_rng(3, "init", 0);
        let params = init_backbone_params(&cfg, &mut rng);
        let (feats, coords) = random_bag(7, 8, 4);

        let base = logits_for(&cfg, &params, &feats, &coords);
        // Rotate rows by 3.
        let n = 7;
        let perm: Vec<usize> = (0..n).map(|i| (i + 3) % n).collect();
        let permuted = Array::from_fn([n, 8], |i| {
            let (r, c) = (i / 8, i % 8);
            feats.get2(perm[r], c)
        });
        let shuffled = logits_for(&cfg, &params, &permuted, &coords);
        for (a, b) in base.iter().zip(&shuffled) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn duplicated_identical_tile_matches_single_tile() {
        let cfg = toy_cfg();
        let mut rng = derived_rng(5, "init", 0);
        let params = init_backbone_params(&cfg, &mut rng);
        let tile: Vec<f32> = (0..8).map(|i| (i as f32 * 0.3).cos()).collect();
        let one = Array::from_rows(&[tile.clone()]);
        let eight = Array::from_rows(&vec![tile; 8]);
        let c1 = Array::from_vec([1, 2], vec![100.0, 200.0]);
        let c8 = Array::from_fn([8, 2], |i| if i % 2 == 0 { 100.0 } else { 200.0 });

        let a = logits_for(&cfg, &params, &one, &c1);
        let b = logits_for(&cfg, &params, &eight, &c8);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn coordinates_are_ignored_when_positional_is_off() {
        let mut cfg = toy_cfg();
        cfg.use_positional = false;
        let mut rng = derived_rng(6, "init", 0);
        let params = init_backbone_params(&cfg, &mut rng);
        let (feats, coords) = random_bag(4, 8, 7);
        let moved = coords.map(|v| v * 3.0 + 11.0);
        let a = logits_for(&cfg, &params, &feats, &coords);
        let b = logits_for(&cfg, &params, &feats, &moved);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn zeroed_projection_leaves_positional_term_only() {
        let cfg = toy_cfg();
        let mut rng = derived_rng(8, "init", 0);
        let mut params = init_backbone_params(&cfg, &mut rng);
        for name in ["embed.w_feat", "embed.b_feat"] {
            let t = params.get_mut(name).unwrap();
            *t = Array::zeros(t.shape().to_vec());
        }
        let (feats, coords) = random_bag(5, 8, 9);
        let mut tape = Tape::<f32>::inference();
        let bind = TapeBinding::bind(&mut tape, &params);
        let f = tape.constant(feats);
        let nc = normalize_coords(&coords);
        let ncn = tape.constant(nc);
        let pos = positional_term(&mut tape, &bind, ncn).unwrap();
        let tokens = tokenize(&mut tape, &bind, f, Some(pos), None).unwrap();
        assert_eq!(tape.value(tokens).data(), tape.value(pos).data());
    }

    #[test]
    fn zero_classifier_weights_yield_bias_logits() {
        let cfg = toy_cfg();
        let mut rng = derived_rng(10, "init", 0);
        let mut params = init_backbone_params(&cfg, &mut rng);
        let w = params.get_mut("head.w_cls").unwrap();
        *w = Array::zeros(w.shape().to_vec());
        let b = params.get_mut("head.b_cls").unwrap();
        *b = Array::vector(vec![0.5, -1.0, 2.0]);
        let (feats, coords) = random_bag(4, 8, 11);
        let logits = logits_for(&cfg, &params, &feats, &coords);
        assert_eq!(logits, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn non_finite_params_are_caught_with_layer_index() {
        let cfg = toy_cfg();
        let mut rng = derived_rng(12, "init", 0);
        let mut params = init_backbone_params(&cfg, &mut rng);
        params.get_mut("layer1.ffn.w2").unwrap().data_mut()[0] = f32::INFINITY;
        let (feats, coords) = random_bag(4, 8, 13);
        let mut tape = Tape::<f32>::inference();
        let bind = TapeBinding::bind(&mut tape, &params);
        let err = forward_full(&mut tape, &bind, &cfg, &feats, &coords).unwrap_err();
        assert!(matches!(err, ModelError::NonFinite { layer: 1 }));
    }

    #[test]
    fn encoder_classifier_gradients_match_finite_differences() {
        use crate::gradcheck::{gradcheck, Evaluation, GradCheckError, GradCheckSettings};

        let cfg = BackboneConfig {
            d_in: 6,
            d_model: 16,
            heads: 2,
            layers: 1,
            num_classes: 2,
            use_positional: true,
        };
        let mut rng = derived_rng(21, "init", 0);
        let params64 = init_backbone_params(&cfg, &mut rng).cast::<f64>();
        let feats = Array::<f64>::from_fn([5, 6], |i| ((i as f64) * 0.83).sin());
        let coords = Array::<f64>::from_fn([5, 2], |i| ((i as f64) * 1.7).cos() * 300.0);

        let eval = |p: &ParamSet<f64>, with_grads: bool| -> Result<Evaluation, GradCheckError> {
            let mut tape = Tape::new();
            let bind = TapeBinding::bind(&mut tape, p);
            let logits = forward_full(&mut tape, &bind, &cfg, &feats, &coords)
                .map_err(|e| GradCheckError::Model(e.to_string()))?;
            let loss = tape
                .cross_entropy(logits, 1)
                .map_err(|e| GradCheckError::Model(e.to_string()))?;
            let loss_v = tape.value(loss).scalar_value();
            let grads = if with_grads {
                tape.backward(loss).map_err(|e| GradCheckError::Model(e.to_string()))?;
                Some(bind.grads(&tape))
            } else {
                None
            };
            Ok(Evaluation {
                loss: loss_v,
                kink_margins: vec![],
                grads,
            })
        };

        let report = gradcheck(
            &params64,
            eval,
            GradCheckSettings {
                step: 1e-4,
                tolerance: 1e-3,
            },
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
