//! Scratch probe: how does a checkpoint score oracle keep/drop views?
//!
//! Oracle keep = gates 1.0 exactly on the planted evidence tiles, 0 elsewhere;
//! oracle drop = the complement. Prints per-class means of the true-class
//! probability under full, oracle-keep, and oracle-drop views.
//!
//! Usage: cargo run --release --example probe -- <run-dir> <ckpt-name>

use std::path::PathBuf;

use reamil::data::{read_evidence_sidecar, DatasetManifest, Split};
use reamil::model::ReamilModel;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().expect("run dir"));
    let ckpt = args.next().unwrap_or_else(|| "baseline.ckpt".into());
    let data_root = dir.join("data");
    let manifest = DatasetManifest::read(&data_root.join("manifest.tsv")).expect("manifest");
    let model = ReamilModel::load(&dir.join(&ckpt)).expect("checkpoint");

    let c = manifest.num_classes();
    // per class: [full, keep, drop, empty] probability sums and a bag count
    let mut sums = vec![[0.0f64; 4]; c];
    // per class, learned gates: [p_keep, p_drop, mean z on evidence, mean z elsewhere]
    let mut gstats = vec![[0.0f64; 4]; c];
    let mut counts = vec![0usize; c];
    let mut has_sel = false;

    for rec in manifest.split_records(Split::Test) {
        let bag = manifest.load_record(&data_root, rec).expect("bag");
        let sidecar = data_root
            .join(&rec.path)
            .with_extension("")
            .with_extension("evidence.txt");
        let evidence = read_evidence_sidecar(&sidecar).expect("sidecar");
        let y = bag.label();
        let n = bag.n_tiles();

        let mut keep = vec![0.0f32; n];
        for &i in &evidence {
            keep[i] = 1.0;
        }
        let drop: Vec<f32> = keep.iter().map(|g| 1.0 - g).collect();

        let full = model.predict_full(&bag).expect("full")[y];
        let pk = model.gated_probs(&bag, &keep).expect("keep")[y];
        let pd = model.gated_probs(&bag, &drop).expect("drop")[y];
        let pe = model.gated_probs(&bag, &vec![0.0; n]).expect("empty")[y];
        sums[y][0] += full;
        sums[y][1] += pk;
        sums[y][2] += pd;
        sums[y][3] += pe;
        counts[y] += 1;

        if let Ok(sel) = model.selection(&bag) {
            let gates: Vec<f32> = sel.gates.iter().map(|&g| g as f32).collect();
            let lk = model.gated_probs(&bag, &gates).expect("lk")[y];
            let ld: Vec<f32> = gates.iter().map(|g| 1.0 - g).collect();
            let ld = model.gated_probs(&bag, &ld).expect("ld")[y];
            let (mut zev, mut zbg) = (0.0f64, 0.0f64);
            for (i, &g) in sel.gates.iter().enumerate() {
                if evidence.contains(&i) {
                    zev += g;
                } else {
                    zbg += g;
                }
            }
            zev /= evidence.len().max(1) as f64;
            zbg /= (n - evidence.len()) as f64;
            gstats[y][0] += lk;
            gstats[y][1] += ld;
            gstats[y][2] += zev;
            gstats[y][3] += zbg;
            has_sel = true;
        }
    }

    println!("checkpoint: {ckpt}");
    for y in 0..c {
        let k = counts[y] as f64;
        println!(
            "class {y}: n={:3}  p_full={:.4}  p_oracle_keep={:.4}  p_oracle_drop={:.4}  p_empty={:.4}",
            counts[y],
            sums[y][0] / k,
            sums[y][1] / k,
            sums[y][2] / k,
            sums[y][3] / k
        );
        if has_sel {
            println!(
                "         learned: p_keep={:.4}  p_drop={:.4}  z_on_evidence={:.4}  z_elsewhere={:.4}",
                gstats[y][0] / k,
                gstats[y][1] / k,
                gstats[y][2] / k,
                gstats[y][3] / k
            );
        }
    }
}
