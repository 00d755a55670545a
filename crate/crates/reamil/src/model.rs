//! Evaluation-mode bundle: weights, architecture, phase, and the
//! noise-free forward passes everything downstream consumes.
//!
//! A model is either a baseline (backbone only) or an evidence model
//! (backbone plus selection head and an evaluation temperature). All
//! methods here run on inference tapes with deterministic outputs; the
//! stochastic training path lives in the trainer.

use std::path::Path;

use thiserror::Error;

use crate::backbone::{
    classify, encode, forward_full, init_backbone_params, normalize_coords, positional_term,
    tokenize, BackboneConfig, ModelError,
};
use crate::checkpoint::{self, CheckpointError};
use crate::data::BagRecord;
use crate::evidence::{init_evidence_params, rank_tiles, select_logits, top_k_mask};
use crate::metrics::{KCurve, MetricsError, SlideEvidenceRow};
use crate::objectives::contiguity_loss;
use crate::params::{ParamSet, TapeBinding};
use crate::rng::derived_rng;
use crate::tape::Tape;
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Baseline,
    Evidence,
}

impl Phase {
    fn code(self) -> f32 {
        match self {
            Phase::Baseline => 0.0,
            Phase::Evidence => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Evidence => "evidence",
        }
    }
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("checkpoint is missing required scalar `{0}`")]
    MissingScalar(String),
    #[error("checkpoint scalar `{name}` has invalid value {value}")]
    BadScalar { name: String, value: f64 },
    #[error("a baseline checkpoint has no selection head; train the evidence phase first")]
    NoSelectionHead,
}

/// Per-tile selection readout at evaluation temperature.
#[derive(Clone, Debug)]
pub struct SelectionInfo {
    pub logits: Vec<f64>,
    /// Soft eval gates `sigmoid(logit / T)`, aligned with `logits`.
    pub gates: Vec<f64>,
    /// Tile indices ordered by descending logit.
    pub ranking: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ReamilModel {
    pub config: BackboneConfig,
    pub params: ParamSet<f32>,
    pub phase: Phase,
    /// Gate temperature used at evaluation; the annealed end temperature
    /// for trained evidence models.
    pub temperature: f64,
}

const CONFIG_SCALARS: [&str; 8] = [
    "config.d_in",
    "config.d_model",
    "config.heads",
    "config.layers",
    "config.num_classes",
    "config.use_positional",
    "config.phase",
    "config.temperature",
];

impl ReamilModel {
    /// Fresh baseline model with weights drawn from the seed's dedicated
    /// stream.
    pub fn new_baseline(config: BackboneConfig, seed: u64) -> Result<Self, BundleError> {
        config.validate()?;
        let mut rng = derived_rng(seed, "init-backbone", 0);
        let params = init_backbone_params(&config, &mut rng);
        Ok(ReamilModel {
            config,
            params,
            phase: Phase::Baseline,
            temperature: 1.0,
        })
    }

    /// Promotes a baseline to the evidence phase: weights are kept and a
    /// freshly initialized selection head is attached.
    pub fn attach_selection_head(&mut self, seed: u64) -> Result<(), BundleError> {
        if self.phase == Phase::Evidence {
            return Ok(());
        }
        let mut rng = derived_rng(seed, "init-head", 0);
        let head = init_evidence_params(self.config.d_model, &mut rng);
        self.params.extend(head);
        self.phase = Phase::Evidence;
        Ok(())
    }

    /// The parameter names and shapes this model must carry.
    fn expected_params(config: &BackboneConfig, phase: Phase) -> ParamSet<f32> {
        let mut probe = derived_rng(0, "shape-probe", 0);
        let mut expected = init_backbone_params(config, &mut probe);
        if phase == Phase::Evidence {
            expected.extend(init_evidence_params(config.d_model, &mut probe));
        }
        expected
    }

    /// Serializes weights plus `config.*` scalars into checkpoint tensors.
    pub fn to_tensors(&self) -> ParamSet<f32> {
        let mut out = self.params.clone();
        let c = &self.config;
        let scalars = [
            c.d_in as f32,
            c.d_model as f32,
            c.heads as f32,
            c.layers as f32,
            c.num_classes as f32,
            if c.use_positional { 1.0 } else { 0.0 },
            self.phase.code(),
            self.temperature as f32,
        ];
        for (name, v) in CONFIG_SCALARS.iter().zip(scalars) {
            out.insert(*name, Array::scalar(v));
        }
        out
    }

    /// Rebuilds a model from checkpoint tensors, validating the scalar
    /// block and every parameter shape.
    pub fn from_tensors(tensors: ParamSet<f32>) -> Result<Self, BundleError> {
        let scalar = |name: &str| -> Result<f64, BundleError> {
            let t = tensors
                .get(name)
                .ok_or_else(|| BundleError::MissingScalar(name.into()))?;
            if t.rank() != 0 {
                return Err(BundleError::BadScalar {
                    name: name.into(),
                    value: f64::NAN,
                });
            }
            Ok(t.scalar_value() as f64)
        };
        let count = |name: &str| -> Result<usize, BundleError> {
            let v = scalar(name)?;
            if v.fract() != 0.0 || v < 0.0 || !v.is_finite() {
                return Err(BundleError::BadScalar { name: name.into(), value: v });
            }
            Ok(v as usize)
        };
        let config = BackboneConfig {
            d_in: count("config.d_in")?,
            d_model: count("config.d_model")?,
            heads: count("config.heads")?,
            layers: count("config.layers")?,
            num_classes: count("config.num_classes")?,
            use_positional: count("config.use_positional")? != 0,
        };
        config.validate()?;
        let phase = match count("config.phase")? {
            0 => Phase::Baseline,
            1 => Phase::Evidence,
            v => {
                return Err(BundleError::BadScalar {
                    name: "config.phase".into(),
                    value: v as f64,
                })
            }
        };
        let temperature = scalar("config.temperature")?;
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(BundleError::BadScalar {
                name: "config.temperature".into(),
                value: temperature,
            });
        }

        let mut params = ParamSet::new();
        for (name, tensor) in tensors.iter() {
            if !name.starts_with("config.") {
                params.insert(name, tensor.clone());
            }
        }
        checkpoint::validate_shapes(&params, &Self::expected_params(&config, phase))?;
        Ok(ReamilModel {
            config,
            params,
            phase,
            temperature,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), BundleError> {
        Ok(checkpoint::write_checkpoint(path, &self.to_tensors())?)
    }

    pub fn load(path: &Path) -> Result<Self, BundleError> {
        Self::from_tensors(checkpoint::read_checkpoint(path)?)
    }

    /// Class probabilities for the ungated bag.
    pub fn predict_full(&self, bag: &BagRecord) -> Result<Vec<f64>, BundleError> {
        let mut tape = Tape::<f32>::inference();
        let bind = TapeBinding::bind(&mut tape, &self.params);
        let logits = forward_full(&mut tape, &bind, &self.config, bag.features(), bag.coords())?;
        let probs = tape.softmax(logits, 0).map_err(ModelError::from)?;
        Ok(tape.value(probs).data().iter().map(|&v| v as f64).collect())
    }

    /// Class probabilities with an explicit per-tile gate vector applied
    /// to features and positional term (soft or hard).
    pub fn gated_probs(&self, bag: &BagRecord, gates: &[f32]) -> Result<Vec<f64>, BundleError> {
        assert_eq!(gates.len(), bag.n_tiles(), "one gate per tile");
        let mut tape = Tape::<f32>::inference();
        let bind = TapeBinding::bind(&mut tape, &self.params);
        let feats = tape.constant(bag.features().clone());
        let gate = tape.constant(Array::vector(gates.to_vec()));
        let pos = if self.config.use_positional {
            let nc = tape.constant(normalize_coords(bag.coords()));
            Some(positional_term(&mut tape, &bind, nc)?)
        } else {
            None
        };
        let tokens = tokenize(&mut tape, &bind, feats, pos, Some(gate))?;
        let h = encode(&mut tape, &bind, &self.config, tokens)?;
        let logits = classify(&mut tape, &bind, &self.config, h)?;
        let probs = tape.softmax(logits, 0).map_err(ModelError::from)?;
        Ok(tape.value(probs).data().iter().map(|&v| v as f64).collect())
    }

    /// Selection logits, soft eval gates, and the tile ranking.
    /// Evidence-phase models only.
    pub fn selection(&self, bag: &BagRecord) -> Result<SelectionInfo, BundleError> {
        if self.phase != Phase::Evidence {
            return Err(BundleError::NoSelectionHead);
        }
        let mut tape = Tape::<f32>::inference();
        let bind = TapeBinding::bind(&mut tape, &self.params);
        let feats = tape.constant(bag.features().clone());
        let pos = if self.config.use_positional {
            let nc = tape.constant(normalize_coords(bag.coords()));
            Some(positional_term(&mut tape, &bind, nc)?)
        } else {
            None
        };
        let tokens = tokenize(&mut tape, &bind, feats, pos, None)?;
        let logit_node = select_logits(&mut tape, &bind, tokens)?;
        let logits: Vec<f64> = tape
            .value(logit_node)
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let inv_t = 1.0 / self.temperature;
        let gates: Vec<f64> = logits.iter().map(|&a| sigmoid(a * inv_t)).collect();
        let ranking = rank_tiles(&logits);
        Ok(SelectionInfo { logits, gates, ranking })
    }

    /// K-curve for one bag: for each grid K, reveal the top-K ranked
    /// tiles with a hard 0/1 mask and record the true-class probability.
    /// Grid entries beyond the bag size are dropped with a warning; the
    /// full-bag point is always present.
    pub fn kcurve(&self, bag: &BagRecord, grid: &[usize]) -> Result<KCurve, BundleError> {
        let n = bag.n_tiles();
        let sel = self.selection(bag)?;
        let mut ks: Vec<usize> = Vec::with_capacity(grid.len() + 1);
        for &k in grid {
            if k == 0 {
                continue;
            }
            if k > n {
                log::warn!(
                    "k-curve grid entry {k} exceeds bag size {n} on {}; dropped",
                    bag.slide_id()
                );
                continue;
            }
            ks.push(k);
        }
        ks.sort_unstable();
        ks.dedup();
        if ks.last() != Some(&n) {
            ks.push(n);
        }
        let mut p_y = Vec::with_capacity(ks.len());
        for &k in &ks {
            let mask = top_k_mask(&sel.logits, k);
            let probs = self.gated_probs(bag, &mask)?;
            p_y.push(probs[bag.label()]);
        }
        Ok(KCurve::new(bag.slide_id(), n, ks, p_y)?)
    }

    /// Per-slide evidence diagnostics at threshold `tau`, plus the
    /// K-curve they derive from. Keep and drop views use the soft eval
    /// gates; contiguity is measured on normalized coordinates.
    pub fn evidence_row(
        &self,
        bag: &BagRecord,
        grid: &[usize],
        tau: f64,
    ) -> Result<(SlideEvidenceRow, KCurve), BundleError> {
        let curve = self.kcurve(bag, grid)?;
        let sel = self.selection(bag)?;
        let gates_f32: Vec<f32> = sel.gates.iter().map(|&g| g as f32).collect();
        let drop_gates: Vec<f32> = gates_f32.iter().map(|g| 1.0 - g).collect();

        let p_full = self.predict_full(bag)?[bag.label()];
        let p_keep = self.gated_probs(bag, &gates_f32)?[bag.label()];
        let p_drop = self.gated_probs(bag, &drop_gates)?[bag.label()];

        let mass: f64 = sel.gates.iter().sum();
        let degenerate = mass < 1e-8;
        let contig = {
            let mut tape = Tape::<f64>::inference();
            let z = tape.constant(Array::vector(sel.gates.clone()));
            let nc = tape.constant(normalize_coords(bag.coords()).cast::<f64>());
            let node = contiguity_loss(&mut tape, z, nc)?;
            tape.value(node).scalar_value()
        };
        let mean_z = mass / sel.gates.len() as f64;

        let row = SlideEvidenceRow {
            slide_id: bag.slide_id().to_string(),
            msk: crate::metrics::msk(&curve, tau),
            aukc: crate::metrics::aukc(&curve),
            suff_gap: p_full - p_keep,
            p_drop,
            contig,
            mean_z,
            degenerate_gates: degenerate,
        };
        Ok((row, curve))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One exported evidence line: tile index, normalized coordinates,
/// selection logit, eval gate.
#[derive(Clone, Debug)]
pub struct EvidenceExportRow {
    pub tile_index: usize,
    pub u: f64,
    pub v: f64,
    pub logit: f64,
    pub gate: f64,
}

/// Tab-separated evidence export, tiles ordered by descending logit.
pub fn evidence_tsv(rows: &[EvidenceExportRow]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("tile_index\tu\tv\tlogit\tgate\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.tile_index, r.u, r.v, r.logit, r.gate
        );
    }
    out
}

/// Builds the export rows for one bag from its selection readout.
pub fn export_rows(bag: &BagRecord, sel: &SelectionInfo) -> Vec<EvidenceExportRow> {
    let nc = normalize_coords(bag.coords());
    sel.ranking
        .iter()
        .map(|&i| EvidenceExportRow {
            tile_index: i,
            u: nc.get2(i, 0) as f64,
            v: nc.get2(i, 1) as f64,
            logit: sel.logits[i],
            gate: sel.gates[i],
        })
        .collect()
}
