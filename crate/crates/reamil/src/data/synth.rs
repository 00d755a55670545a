//! Synthetic planted-evidence bags.
//!
//! Every class has its own mean feature direction. A bag of class `y`
//! plants that direction on `evidence_tiles` randomly chosen tiles whose
//! coordinates fall inside one random disc, so the evidence is both
//! feature- and space-coherent. The planted tile indices are written next
//! to each bag as a sidecar (`<slide>.evidence.txt`), giving downstream
//! selector-precision checks a ground truth to compare against.
//!
//! Each bag additionally carries `counter_tiles` weaker tiles pointing at
//! a *different* class (scaled by `counter_scale`, scattered uniformly).
//! The label is decided by the stronger signal, and the complement of the
//! true evidence still contains class-discriminative content: a drop view
//! that removes the real evidence should support some other class rather
//! than sit at a coin flip, which is what the exclusion term trains for.
//! Without counter tiles the evidence complement is statistically
//! identical across classes and no classifier can push the true-class
//! probability of the drop view below 1/C on average.
//!
//! All draws come from streams derived per `(seed, purpose, bag index)`,
//! so regenerating with the same config is byte-identical regardless of
//! call order.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{
    split_patients, write_bag, BagRecord, DataError, DatasetManifest, ManifestRecord, SplitEntry,
    SplitRatios,
};
use crate::rng::derived_rng;
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train_bags: usize,
    pub val_bags: usize,
    pub test_bags: usize,
    /// Tiles per bag (N).
    pub tiles_per_bag: usize,
    /// Feature dimension (d).
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Evidence tiles planted per bag (k_ev).
    pub evidence_tiles: usize,
    /// Radius of the disc the evidence coordinates are drawn from.
    pub evidence_radius: f64,
    /// Weak counter-class tiles planted per bag (uniform coordinates).
    pub counter_tiles: usize,
    /// Counter-tile signal as a fraction of `signal_magnitude`, in [0, 1).
    pub counter_scale: f64,
    /// L2 norm of each class's planted mean vector.
    pub signal_magnitude: f64,
    /// Standard deviation of the background feature noise.
    pub noise_scale: f64,
    /// Coordinates live in [0, extent]^2.
    pub coord_extent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_bags: 200,
            val_bags: 50,
            test_bags: 50,
            tiles_per_bag: 64,
            feature_dim: 64,
            num_classes: 2,
            evidence_tiles: 4,
            evidence_radius: 60.0,
            counter_tiles: 4,
            counter_scale: 0.5,
            signal_magnitude: 4.0,
            noise_scale: 1.0,
            coord_extent: 1000.0,
            seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |what: &str| Err(DataError::BadSynthConfig(what.to_string()));
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.tiles_per_bag == 0 || self.feature_dim == 0 {
            return fail("tiles_per_bag and feature_dim must be positive");
        }
        if self.evidence_tiles + self.counter_tiles > self.tiles_per_bag {
            return fail("evidence_tiles + counter_tiles must not exceed tiles_per_bag");
        }
        if !(0.0..1.0).contains(&self.counter_scale) {
            return fail("counter_scale must lie in [0, 1) so the true evidence stays stronger");
        }
        if self.train_bags + self.val_bags + self.test_bags == 0 {
            return fail("at least one bag must be generated");
        }
        if !(self.evidence_radius > 0.0)
            || !(self.signal_magnitude > 0.0)
            || !(self.noise_scale > 0.0)
            || !(self.coord_extent > 0.0)
        {
            return fail("radius, magnitudes, and extent must be positive");
        }
        if 2.0 * self.evidence_radius > self.coord_extent {
            return fail("evidence disc must fit inside the coordinate extent");
        }
        Ok(())
    }

    pub fn total_bags(&self) -> usize {
        self.train_bags + self.val_bags + self.test_bags
    }
}

/// One mean direction per class, mutually orthogonal (sequential
/// Gram–Schmidt) and scaled to `signal_magnitude`, so no class signal
/// leaks into another class's direction even at small feature_dim.
pub(crate) fn class_means(cfg: &SynthConfig) -> Vec<Vec<f32>> {
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
    for class in 0..cfg.num_classes {
        let mut rng = derived_rng(cfg.seed, "class-mean", class as u64);
        let raw: Vec<f64> = (0..cfg.feature_dim).map(|_| normal.sample(&mut rng)).collect();
        let mut dir = raw.clone();
        for prev in &accepted {
            let dot: f64 = dir.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (v, p) in dir.iter_mut().zip(prev) {
                *v -= dot * p;
            }
        }
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        // More classes than dimensions: fall back to the raw direction.
        if norm < 1e-9 {
            dir = raw;
        }
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut dir {
            *v /= norm;
        }
        accepted.push(dir);
    }
    accepted
        .into_iter()
        .map(|dir| {
            dir.into_iter()
                .map(|v| (v * cfg.signal_magnitude) as f32)
                .collect()
        })
        .collect()
}

pub(crate) struct GeneratedBag {
    pub(crate) bag: BagRecord,
    pub(crate) evidence: Vec<usize>,
    /// Weak counter-class tiles; not written to the sidecar (they are not
    /// ground-truth evidence, only distractor content for the complement).
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) counter: Vec<usize>,
}

pub(crate) fn gen_bag(cfg: &SynthConfig, means: &[Vec<f32>], index: usize) -> GeneratedBag {
    let n = cfg.tiles_per_bag;
    let d = cfg.feature_dim;
    let label = index % cfg.num_classes;
    let mut rng = derived_rng(cfg.seed, "bag", index as u64);
    let normal = Normal::new(0.0f64, cfg.noise_scale).unwrap();

    let mut features: Vec<f32> = (0..n * d).map(|_| normal.sample(&mut rng) as f32).collect();
    let mut coords: Vec<f32> = Vec::with_capacity(n * 2);
    for _ in 0..n {
        coords.push((rng.gen::<f64>() * cfg.coord_extent) as f32);
        coords.push((rng.gen::<f64>() * cfg.coord_extent) as f32);
    }

    let picked =
        rand::seq::index::sample(&mut rng, n, cfg.evidence_tiles + cfg.counter_tiles).into_vec();
    let mut evidence = picked[..cfg.evidence_tiles].to_vec();
    let mut counter = picked[cfg.evidence_tiles..].to_vec();
    evidence.sort_unstable();
    counter.sort_unstable();

    if !evidence.is_empty() {
        let mean = &means[label];
        // One disc per bag; its center keeps the disc inside the extent.
        let r = cfg.evidence_radius;
        let lo = r;
        let span = cfg.coord_extent - 2.0 * r;
        let cx = lo + rng.gen::<f64>() * span;
        let cy = lo + rng.gen::<f64>() * span;
        for &tile in &evidence {
            for j in 0..d {
                features[tile * d + j] += mean[j];
            }
            let radius = r * rng.gen::<f64>().sqrt();
            let angle = rng.gen::<f64>() * std::f64::consts::TAU;
            coords[tile * 2] = (cx + radius * angle.cos()) as f32;
            coords[tile * 2 + 1] = (cy + radius * angle.sin()) as f32;
        }
    }

    // Weak off-class tiles keep their uniform coordinates; with more than
    // two classes the off-classes take turns.
    for (i, &tile) in counter.iter().enumerate() {
        let off = (label + 1 + (i % (cfg.num_classes - 1))) % cfg.num_classes;
        let mean = &means[off];
        for j in 0..d {
            features[tile * d + j] += (cfg.counter_scale as f32) * mean[j];
        }
    }

    let bag = BagRecord::new(
        format!("S{index:04}"),
        format!("P{index:04}"),
        label,
        Array::from_vec([n, d], features),
        Array::from_vec([n, 2], coords),
    )
    .expect("generated bag is structurally valid");
    GeneratedBag {
        bag,
        evidence,
        counter,
    }
}

/// Generates the dataset under `out_dir`: `bags/*.bag` plus evidence
/// sidecars, and `manifest.tsv` at the top. Returns the manifest.
pub fn gen_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest, DataError> {
    cfg.validate()?;
    let bags_dir = out_dir.join("bags");
    std::fs::create_dir_all(&bags_dir).map_err(|source| DataError::Io {
        path: bags_dir.clone(),
        source,
    })?;

    let means = class_means(cfg);
    let total = cfg.total_bags();
    let mut entries = Vec::with_capacity(total);
    let mut generated = Vec::with_capacity(total);
    for i in 0..total {
        let g = gen_bag(cfg, &means, i);
        entries.push(SplitEntry {
            slide_id: g.bag.slide_id().to_string(),
            patient_id: g.bag.patient_id().to_string(),
            label: g.bag.label(),
        });
        generated.push(g);
    }

    let ratios = SplitRatios::new(
        cfg.train_bags as f64 / total as f64,
        cfg.val_bags as f64 / total as f64,
        cfg.test_bags as f64 / total as f64,
    )?;
    let assignment = split_patients(&entries, ratios, cfg.seed)?;

    let mut records = Vec::with_capacity(total);
    for g in &generated {
        let rel = PathBuf::from("bags").join(format!("{}.bag", g.bag.slide_id()));
        write_bag(&g.bag, &out_dir.join(&rel))?;
        let sidecar = bags_dir.join(format!("{}.evidence.txt", g.bag.slide_id()));
        let line = g
            .evidence
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        std::fs::write(&sidecar, format!("{line}\n")).map_err(|source| DataError::Io {
            path: sidecar,
            source,
        })?;
        records.push(ManifestRecord {
            slide_id: g.bag.slide_id().to_string(),
            patient_id: g.bag.patient_id().to_string(),
            label: g.bag.label(),
            split: assignment[g.bag.slide_id()],
            path: rel,
        });
    }

    let manifest = DatasetManifest::new(records, cfg.num_classes, cfg.feature_dim)?;
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Planted tile indices for one slide (empty when `evidence_tiles` is 0).
pub fn read_evidence_sidecar(path: &Path) -> Result<Vec<usize>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for tok in text.split_whitespace() {
        out.push(tok.parse::<usize>().map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            line: 1,
            what: format!("bad evidence index {tok:?}: {e}"),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn small() -> SynthConfig {
        SynthConfig {
            train_bags: 12,
            val_bags: 4,
            test_bags: 4,
            tiles_per_bag: 16,
            feature_dim: 8,
            evidence_tiles: 3,
            coord_extent: 500.0,
            evidence_radius: 40.0,
            seed: 99,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn every_bag_gets_k_evidence_tiles_in_its_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_synthetic(&small(), dir.path()).unwrap();
        for r in m.records() {
            let sidecar = dir
                .path()
                .join("bags")
                .join(format!("{}.evidence.txt", r.slide_id));
            let ev = read_evidence_sidecar(&sidecar).unwrap();
            assert_eq!(ev.len(), 3, "{} (class {})", r.slide_id, r.label);
        }
    }

    #[test]
    fn zero_evidence_tiles_yield_empty_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            evidence_tiles: 0,
            counter_tiles: 0,
            ..small()
        };
        let m = gen_synthetic(&cfg, dir.path()).unwrap();
        for r in m.records() {
            let sidecar = dir
                .path()
                .join("bags")
                .join(format!("{}.evidence.txt", r.slide_id));
            assert!(read_evidence_sidecar(&sidecar).unwrap().is_empty());
        }
    }

    #[test]
    fn evidence_coordinates_fit_in_one_disc() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let m = gen_synthetic(&cfg, dir.path()).unwrap();
        for r in m.records() {
            let bag = m.load_record(dir.path(), r).unwrap();
            let ev = read_evidence_sidecar(
                &dir.path()
                    .join("bags")
                    .join(format!("{}.evidence.txt", r.slide_id)),
            )
            .unwrap();
            for (i, &a) in ev.iter().enumerate() {
                for &b in &ev[i + 1..] {
                    let dx = bag.coords().get2(a, 0) - bag.coords().get2(b, 0);
                    let dy = bag.coords().get2(a, 1) - bag.coords().get2(b, 1);
                    let dist = ((dx * dx + dy * dy) as f64).sqrt();
                    assert!(
                        dist <= 2.0 * cfg.evidence_radius + 1e-3,
                        "{}: tiles {a},{b} are {dist} apart",
                        r.slide_id
                    );
                }
            }
        }
    }

    #[test]
    fn signal_magnitude_is_recovered_from_samples() {
        // Enough evidence tiles that the sample mean difference is tight.
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            train_bags: 80,
            val_bags: 10,
            test_bags: 10,
            tiles_per_bag: 64,
            feature_dim: 16,
            evidence_tiles: 24,
            counter_tiles: 0,
            seed: 5,
            ..SynthConfig::default()
        };
        let m = gen_synthetic(&cfg, dir.path()).unwrap();
        let d = cfg.feature_dim;
        let mut ev_sum = vec![0.0f64; d];
        let mut bg_sum = vec![0.0f64; d];
        let (mut n_ev, mut n_bg) = (0usize, 0usize);
        for r in m.records().iter().filter(|r| r.label == 1) {
            let bag = m.load_record(dir.path(), r).unwrap();
            let ev: std::collections::BTreeSet<usize> = read_evidence_sidecar(
                &dir.path()
                    .join("bags")
                    .join(format!("{}.evidence.txt", r.slide_id)),
            )
            .unwrap()
            .into_iter()
            .collect();
            for t in 0..bag.n_tiles() {
                let (sum, count) = if ev.contains(&t) {
                    (&mut ev_sum, &mut n_ev)
                } else {
                    (&mut bg_sum, &mut n_bg)
                };
                for j in 0..d {
                    sum[j] += bag.features().get2(t, j) as f64;
                }
                *count += 1;
            }
        }
        assert!(n_ev >= 1000, "need at least 1000 evidence tiles, got {n_ev}");
        let mut norm2 = 0.0;
        for j in 0..d {
            let diff = ev_sum[j] / n_ev as f64 - bg_sum[j] / n_bg as f64;
            norm2 += diff * diff;
        }
        let norm = norm2.sqrt();
        // Per-dim stderr of the mean difference, projected along the mean
        // direction; the cross-dim noise inflates the norm by a small bias
        // folded into the bound.
        let se = cfg.noise_scale * (1.0 / n_ev as f64 + 1.0 / n_bg as f64).sqrt();
        let bias = d as f64 * se * se / (2.0 * cfg.signal_magnitude);
        let tol = 3.0 * se + bias;
        assert!(
            (norm - cfg.signal_magnitude).abs() <= tol,
            "norm {norm} vs {} (tol {tol})",
            cfg.signal_magnitude
        );
    }

    #[test]
    fn counter_tiles_carry_the_scaled_off_class_signal() {
        let cfg = SynthConfig {
            tiles_per_bag: 64,
            feature_dim: 16,
            evidence_tiles: 4,
            counter_tiles: 8,
            counter_scale: 0.5,
            seed: 11,
            ..SynthConfig::default()
        };
        let means = class_means(&cfg);
        let d = cfg.feature_dim;
        let mut sum = vec![0.0f64; d];
        let mut count = 0usize;
        // Class-1 bags carry weak class-0 signal on their counter tiles.
        for index in (1..400).step_by(2) {
            let g = gen_bag(&cfg, &means, index);
            assert!(g.counter.iter().all(|t| !g.evidence.contains(t)));
            assert_eq!(g.counter.len(), cfg.counter_tiles);
            for &tile in &g.counter {
                for j in 0..d {
                    sum[j] += g.bag.features().get2(tile, j) as f64;
                }
                count += 1;
            }
        }
        let expected = cfg.counter_scale * cfg.signal_magnitude;
        let mut norm2 = 0.0;
        let mut along = 0.0;
        for j in 0..d {
            let m = sum[j] / count as f64;
            norm2 += m * m;
            along += m * means[0][j] as f64 / cfg.signal_magnitude;
        }
        let se = cfg.noise_scale / (count as f64).sqrt();
        let bias = d as f64 * se * se / (2.0 * expected);
        let tol = 3.0 * se + bias;
        assert!(
            (norm2.sqrt() - expected).abs() <= tol,
            "counter norm {} vs {expected} (tol {tol})",
            norm2.sqrt()
        );
        assert!(along > 0.0, "counter signal must point along the class-0 mean");
    }

    #[test]
    fn class_means_are_mutually_orthogonal() {
        let cfg = SynthConfig {
            num_classes: 4,
            feature_dim: 16,
            ..SynthConfig::default()
        };
        let means = class_means(&cfg);
        assert_eq!(means.len(), 4);
        for (i, a) in means.iter().enumerate() {
            let norm: f64 = a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - cfg.signal_magnitude).abs() < 1e-4, "class {i} norm {norm}");
            for b in &means[i + 1..] {
                let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
                assert!(dot.abs() < 1e-4, "means {i} not orthogonal (dot {dot})");
            }
        }
    }

    #[test]
    fn split_counts_match_config_exactly_when_divisible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let m = gen_synthetic(&cfg, dir.path()).unwrap();
        let count = |s: Split| m.split_records(s).count();
        assert_eq!(count(Split::Train), 12);
        assert_eq!(count(Split::Val), 4);
        assert_eq!(count(Split::Test), 4);
        // Balanced classes stay balanced inside each split.
        for s in Split::ALL {
            let pos = m.split_records(s).filter(|r| r.label == 1).count();
            assert_eq!(pos * 2, count(s), "split {s} is class-imbalanced");
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let d3 = tempfile::tempdir().unwrap();
        let cfg = small();
        gen_synthetic(&cfg, d1.path()).unwrap();
        gen_synthetic(&cfg, d2.path()).unwrap();
        let mut other = cfg.clone();
        other.seed = 100;
        gen_synthetic(&other, d3.path()).unwrap();

        let read = |dir: &Path, name: &str| std::fs::read(dir.join("bags").join(name)).unwrap();
        assert_eq!(read(d1.path(), "S0003.bag"), read(d2.path(), "S0003.bag"));
        assert_ne!(read(d1.path(), "S0003.bag"), read(d3.path(), "S0003.bag"));
        let m1 = std::fs::read(d1.path().join("manifest.tsv")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.tsv")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small();
        cfg.evidence_tiles = 17;
        assert!(cfg.validate().is_err(), "evidence+counter beyond N must fail");
        let mut cfg = small();
        cfg.signal_magnitude = 0.0;
        assert!(cfg.validate().is_err(), "zero signal must fail");
        let mut cfg = small();
        cfg.evidence_radius = 400.0;
        assert!(cfg.validate().is_err(), "disc wider than extent must fail");
        let mut cfg = small();
        cfg.counter_scale = 1.0;
        assert!(cfg.validate().is_err(), "counter as strong as evidence must fail");
    }
}
