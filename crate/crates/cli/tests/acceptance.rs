//! Acceptance suite. Every test prints one `criterion N ...: PASS|FAIL` line
//! and then asserts the same verdict.
//!
//! Run with `cargo test -p fpds-cli --test acceptance -- --nocapture
//! --test-threads 1` to see the lines in order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fpds_core::cohort::{
    assign_stratum, time_to_conversion, trajectory_of, Diagnosis, LongitudinalRecord,
    StratumLabel, Trajectory,
};
use fpds_core::learn::{
    gaussian_kernel_matrix, k_for_subset, median_pairwise_distance, subag_subsets, tstat_select,
    KlrObjective, Matrix,
};
use fpds_core::metrics::{pearson, ranksum_test, roc_auc, GroupTestOptions};
use fpds_core::parcellation::{generate_patches, ScaleLadder};
use fpds_core::pipeline::{phantom_experiment, read_scores, ExperimentOutcome, PipelineConfig, ScoreMode};
use fpds_core::seed;
use fpds_core::volume::{Geometry, LabelVolume};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    println!(
        "criterion {n:>2} {name}: {}  {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} {name} failed: {detail}");
}

fn small_ladder() -> ScaleLadder {
    ScaleLadder::new(vec![50, 100, 500], true).unwrap()
}

// ----------------------------------------------------------------- 1

#[test]
fn c01_stratification() {
    use Diagnosis::{DAT, MCI, NC};
    use StratumLabel::*;
    let start = Instant::now();
    let cases: &[(&[Diagnosis], usize, StratumLabel)] = &[
        // NC -> NC
        (&[NC, NC, NC], 0, SNc),
        (&[NC, NC, NC], 1, SNc),
        (&[NC, NC, NC], 2, SNc),
        (&[NC], 0, SNc),
        // NC -> MCI
        (&[NC, MCI], 0, UNc),
        (&[NC, NC, MCI, MCI], 1, UNc),
        // NC -> MCI or MCI -> MCI
        (&[MCI, MCI], 0, SMci),
        (&[NC, MCI], 1, SMci),
        (&[NC, MCI, MCI], 2, SMci),
        // NC -> MCI -> DAT
        (&[NC, MCI, DAT], 0, PNc),
        (&[NC, NC, MCI, DAT], 1, PNc),
        // MCI -> DAT, imaged before conversion
        (&[MCI, DAT], 0, PMci),
        (&[NC, MCI, DAT], 1, PMci),
        (&[MCI, MCI, DAT, DAT], 1, PMci),
        // MCI -> DAT, imaged at or after conversion
        (&[MCI, DAT], 1, EDat),
        (&[NC, MCI, DAT], 2, EDat),
        (&[MCI, DAT, DAT], 2, EDat),
        // DAT -> DAT
        (&[DAT, DAT], 0, SDat),
        (&[DAT, DAT], 1, SDat),
        (&[DAT], 0, SDat),
    ];
    let mut wrong = Vec::new();
    for (i, &(dx, at, want)) in cases.iter().enumerate() {
        let r = LongitudinalRecord::from_diagnoses(format!("S{i}"), dx).unwrap();
        let got = assign_stratum(&r, at).unwrap();
        let ttc = time_to_conversion(&r, at).unwrap();
        let traj_ok = trajectory_of(got) == want.trajectory()
            && (ttc.is_none() == (trajectory_of(got) == Trajectory::DatMinus));
        if got != want || !traj_ok {
            wrong.push(format!("{dx:?}@{at} -> {got:?}"));
        }
    }
    // reversions are rejected rather than labelled
    let reversion = LongitudinalRecord::from_diagnoses("R", &[MCI, NC]).unwrap();
    let rejects = assign_stratum(&reversion, 0).is_err();
    let dat_plus: BTreeSet<&str> = StratumLabel::ALL
        .into_iter()
        .filter(|s| trajectory_of(*s) == Trajectory::DatPlus)
        .map(|s| s.as_str())
        .collect();
    let split_ok = dat_plus == BTreeSet::from(["pNC", "pMCI", "eDAT", "sDAT"]);
    let elapsed = start.elapsed();
    verdict(
        1,
        "stratification",
        wrong.is_empty() && rejects && split_ok && elapsed < Duration::from_secs(1),
        format!(
            "{}/{} cases, reversion rejected={rejects}, DAT+ split ok={split_ok}, {elapsed:?} {wrong:?}",
            cases.len() - wrong.len(),
            cases.len()
        ),
    );
}

// ----------------------------------------------------------------- 2

fn auc_pair_oracle(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| l[i]) {
        for j in (0..s.len()).filter(|&j| !l[j]) {
            pairs += 1.0;
            if s[i] > s[j] {
                num += 1.0;
            } else if s[i] == s[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}

#[test]
fn c02_auc_oracle() {
    let start = Instant::now();
    let mut rng = seed::rng(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(2..=12);
        let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        l[0] = true;
        l[1] = false;
        let s: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let got = roc_auc(&s, &l).unwrap().auc;
        worst = worst.max((got - auc_pair_oracle(&s, &l)).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "AUC oracle",
        worst <= 1e-12 && elapsed < Duration::from_secs(5),
        format!("max |diff| {worst:e} over 200 instances, {elapsed:?}"),
    );
}

// ----------------------------------------------------------------- 3

fn t_oracle(x: &[Vec<f64>], y: &[bool], c: usize) -> f64 {
    let pick = |p: bool| -> Vec<f64> { x.iter().zip(y).filter(|(_, &l)| l == p).map(|(r, _)| r[c]).collect() };
    let (a, b) = (pick(true), pick(false));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&a), mean(&b));
    let ss: f64 = a.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>()
        + b.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>();
    let df = (a.len() + b.len() - 2) as f64;
    let se = (ss / df).sqrt() * (1.0 / a.len() as f64 + 1.0 / b.len() as f64).sqrt();
    let d = ma - mb;
    match (se == 0.0, d == 0.0) {
        (true, true) => 0.0,
        (true, false) => d.signum() * f64::INFINITY,
        _ => d / se,
    }
}

#[test]
fn c03_tstat_oracle() {
    let start = Instant::now();
    let mut rng = seed::rng(3);
    let mut mismatches = 0;
    let mut zero_variance_columns = 0;
    for _ in 0..100 {
        let n = rng.random_range(4..=40);
        let p = rng.random_range(1..=64);
        let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        y[..2].fill(true);
        y[2..4].fill(false);
        let mut x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        // plant constant, class-constant and duplicated columns
        for c in 0..p {
            match rng.random_range(0..8) {
                0 => x.iter_mut().for_each(|r| r[c] = 1.5),
                1 => x.iter_mut().zip(&y).for_each(|(r, &l)| r[c] = if l { 2.0 } else { -1.0 }),
                2 if c > 0 => x.iter_mut().for_each(|r| r[c] = r[c - 1]),
                _ => continue,
            }
            zero_variance_columns += 1;
        }
        let t: Vec<f64> = (0..p).map(|c| t_oracle(&x, &y, c)).collect();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| t[b].abs().total_cmp(&t[a].abs()).then(a.cmp(&b)));
        let m = Matrix::from_rows(&x).unwrap();
        let k = rng.random_range(0..=p);
        if tstat_select(&m, &y, k).unwrap() != order[..k] || tstat_select(&m, &y, p).unwrap() != order {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        3,
        "t-statistic oracle",
        mismatches == 0 && elapsed < Duration::from_secs(5),
        format!("{mismatches} mismatches in 100 matrices ({zero_variance_columns} planted edge columns), {elapsed:?}"),
    );
}

// ----------------------------------------------------------------- 4

#[test]
fn c04_gradient_check() {
    let start = Instant::now();
    let mut rng = seed::rng(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(4..=30);
        let k = rng.random_range(1..=5);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        y[0] = true;
        y[1] = false;
        let kernel = gaussian_kernel_matrix(&x, median_pairwise_distance(&x));
        let ridge = 10f64.powf(rng.random_range(-3.0..-1.0));
        let objective = KlrObjective::new(&kernel, &y, ridge);
        let params: Vec<f64> = (0..=n).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let g = objective.gradient(&params);
        let fd: Vec<f64> = (0..=n)
            .map(|i| {
                let h = 1e-6 * params[i].abs().max(1.0);
                let (mut up, mut down) = (params.clone(), params.clone());
                up[i] += h;
                down[i] -= h;
                (objective.value(&up) - objective.value(&down)) / (2.0 * h)
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&g).max(norm(&fd)).max(f64::MIN_POSITIVE));
    }
    let elapsed = start.elapsed();
    verdict(
        4,
        "classifier gradient",
        worst <= 1e-5 && elapsed < Duration::from_secs(10),
        format!("max relative error {worst:e} over 20 instances, {elapsed:?}"),
    );
}

// ----------------------------------------------------------------- 5

fn experiment_config(seed: u64, ladder: ScaleLadder, subsets: usize, effect_size: f64) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.seed = seed;
    c.ladder = ladder;
    c.ensemble.subsets = subsets;
    c.phantom.followup_images = 0;
    c.phantom.effect_size = effect_size;
    c
}

/// Default ladder and F; the full 1700-member ensemble on the phantom.
fn full_ensemble() -> &'static ExperimentOutcome {
    static CELL: OnceLock<ExperimentOutcome> = OnceLock::new();
    CELL.get_or_init(|| {
        let c = experiment_config(0, ScaleLadder::default(), 100, 2.0);
        phantom_experiment(&c, &c.phantom_spec()).unwrap()
    })
}

#[test]
fn c05_subagging_arithmetic() {
    let labels: Vec<Trajectory> = std::iter::repeat_n(Trajectory::DatMinus, 360)
        .chain(std::iter::repeat_n(Trajectory::DatPlus, 238))
        .collect();
    let subsets = subag_subsets(&labels, 100, 0.8, 5).unwrap();
    let balanced = subsets.iter().all(|s| {
        let pos = s.member_indices.iter().filter(|&&i| labels[i].is_positive()).count();
        let distinct = s.member_indices.windows(2).all(|w| w[0] < w[1]);
        pos == 190 && s.len() - pos == 190 && s.len() == 380 && distinct
    });
    let k = k_for_subset(380);
    let default = PipelineConfig::default();
    let m = default.ladder.scale_count();
    let f = default.ensemble.subsets;
    let trained = full_ensemble().classifiers;
    verdict(
        5,
        "subagging arithmetic",
        balanced && k == 38 && m == 17 && trained == m * f && trained == 1700,
        format!("190+190 in every subset={balanced}, k={k}, M={m}, F={f}, trained classifiers={trained}"),
    );
}

// ------------------------------------------------------- CLI runs (6, 11, 12)

struct Run {
    _dir: tempfile::TempDir,
    out: PathBuf,
    status: Option<i32>,
    stderr: String,
}

fn run_all_cli(seed: u64) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let mut c = PipelineConfig::default();
    c.seed = seed;
    c.ladder = small_ladder();
    c.ensemble.subsets = 20;
    c.paths.phantom_dir = dir.path().join("data");
    c.paths.atlas = dir.path().join("data/atlas.rvol");
    c.paths.cohort = dir.path().join("data/cohort.csv");
    c.paths.output_dir = dir.path().join("out");
    c.paths.cache_dir = Some(dir.path().join("cache"));
    let config = dir.path().join("config.json");
    fs::write(&config, c.to_json()).unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_fpds"))
        .arg("--config")
        .arg(&config)
        .arg("run-all")
        .env_remove("FPDS_CACHE_DIR")
        .output()
        .unwrap();
    Run {
        out: dir.path().join("out"),
        _dir: dir,
        status: output.status.code(),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
    }
}

fn run_a() -> &'static Run {
    static CELL: OnceLock<Run> = OnceLock::new();
    CELL.get_or_init(|| run_all_cli(11))
}

fn run_b() -> &'static Run {
    static CELL: OnceLock<Run> = OnceLock::new();
    CELL.get_or_init(|| run_all_cli(11))
}

fn read_table(path: &Path) -> Vec<HashMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            header.iter().cloned().zip(rec.iter().map(String::from)).collect()
        })
        .collect()
}

#[test]
fn c06_fusion_invariant() {
    let run = run_a();
    assert_eq!(run.status, Some(0), "run-all failed: {}", run.stderr);
    let scores = read_scores(&run.out.join("scores.csv")).unwrap();

    let mut members: BTreeMap<String, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for row in read_table(&run.out.join("member_probabilities.csv")) {
        members.entry(row["image_id"].clone()).or_default().push((
            row["classifier"].parse().unwrap(),
            row["subset_index"].parse().unwrap(),
            row["probability"].parse().unwrap(),
        ));
    }
    let mut subsets: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for row in read_table(&run.out.join("subsets.csv")) {
        subsets.entry(row["subset_index"].parse().unwrap()).or_default().insert(row["image_id"].clone());
    }
    let scales = small_ladder().scale_count();
    let total = scales * subsets.len();

    let mut worst = 0.0f64;
    let mut problems = Vec::new();
    let (mut oob, mut fused) = (0, 0);
    for s in &scores {
        let m = &members[&s.image_id];
        let mean = m.iter().map(|x| x.2).sum::<f64>() / m.len() as f64;
        worst = worst.max((mean - s.fpds).abs());
        if !(0.0..=1.0).contains(&s.fpds) || m.len() != s.n_fused {
            problems.push(format!("{}: score {} with {} members", s.image_id, s.fpds, m.len()));
        }
        let distinct: BTreeSet<usize> = m.iter().map(|x| x.0).collect();
        let excluding = subsets.values().filter(|ids| !ids.contains(&s.image_id)).count();
        let honest = m.iter().all(|&(_, f, _)| !subsets[&f].contains(&s.image_id));
        let expected = match s.mode {
            ScoreMode::Oob => {
                oob += 1;
                scales * excluding
            }
            ScoreMode::Fused => {
                fused += 1;
                total
            }
        };
        if !honest || distinct.len() != m.len() || m.len() != expected {
            problems.push(format!("{}: {} members, expected {expected}", s.image_id, m.len()));
        }
    }
    verdict(
        6,
        "FPDS fusion",
        worst <= 1e-12 && problems.is_empty() && oob > 0 && fused > 0,
        format!("{oob} OOB and {fused} fused images, max |mean - score| {worst:e} {problems:?}"),
    );
}

// ----------------------------------------------------------------- 7

fn random_atlas(rng: &mut impl Rng) -> LabelVolume {
    let dims = [rng.random_range(14..=22), rng.random_range(14..=22), rng.random_range(14..=22)];
    let spacing = [rng.random_range(1.0..2.0), rng.random_range(1.0..2.0), rng.random_range(1.0..2.0)];
    let g = Geometry::new(dims, spacing).unwrap();
    let n_rois = rng.random_range(2..=5);
    let centres: Vec<[f64; 3]> = (0..n_rois)
        .map(|_| [0, 1, 2].map(|a| rng.random_range(0.0..dims[a] as f64)))
        .collect();
    let ids: Vec<u32> = (0..n_rois).map(|i| 3 * i as u32 + rng.random_range(1..=3)).collect();
    let mid = dims.map(|d| d as f64 / 2.0);
    let radius = 0.48 * *dims.iter().min().unwrap() as f64;
    let labels = (0..g.len())
        .map(|i| {
            let c = g.coords(i).map(|v| v as f64);
            let d2 = |p: [f64; 3]| (0..3).map(|a| (c[a] - p[a]).powi(2)).sum::<f64>();
            if d2(mid).sqrt() > radius {
                return 0;
            }
            let nearest = (0..n_rois).min_by(|&a, &b| d2(centres[a]).total_cmp(&d2(centres[b]))).unwrap();
            ids[nearest]
        })
        .collect();
    LabelVolume::new(g, labels).unwrap()
}

#[test]
fn c07_parcellation_partition() {
    let start = Instant::now();
    let mut rng = seed::rng(7);
    let mut problems = Vec::new();
    let (mut rois_checked, mut density_checked) = (0, 0);
    for a in 0..50 {
        let atlas = random_atlas(&mut rng);
        for m in [50u32, 100, 500] {
            let p = generate_patches(&atlas, m, seed::derive(7, &[a, m as u64])).unwrap();
            let mut patch_sizes = vec![0usize; p.patch_to_roi.len()];
            let mut roi_sizes: BTreeMap<u32, usize> = BTreeMap::new();
            for (&roi, &patch) in atlas.labels.iter().zip(&p.patch_labels.labels) {
                if roi == 0 || patch == 0 {
                    if roi != patch {
                        problems.push(format!("atlas {a} m={m}: foreground mismatch"));
                    }
                    continue;
                }
                *roi_sizes.entry(roi).or_default() += 1;
                patch_sizes[patch as usize - 1] += 1;
                if p.patch_to_roi[patch as usize - 1] != roi {
                    problems.push(format!("atlas {a} m={m}: patch {patch} crosses into ROI {roi}"));
                }
            }
            if patch_sizes.contains(&0) {
                problems.push(format!("atlas {a} m={m}: empty patch"));
            }
            for (&roi, &size) in &roi_sizes {
                rois_checked += 1;
                let count = p.patch_to_roi.iter().filter(|&&r| r == roi).count();
                let expected = ((size as f64 / m as f64).round() as usize).max(1);
                if count != expected {
                    problems.push(format!("atlas {a} m={m} ROI {roi}: {count} patches, expected {expected}"));
                }
                if size >= m as usize {
                    density_checked += 1;
                    let density = count as f64 / size as f64;
                    let mf = m as f64;
                    if !(1.0 / (1.5 * mf) <= density && density <= 1.5 / mf) {
                        problems.push(format!("atlas {a} m={m} ROI {roi}: density {density}"));
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    problems.truncate(5);
    verdict(
        7,
        "parcellation partition",
        problems.is_empty() && elapsed < Duration::from_secs(30),
        format!("50 atlases x 3 sizes, {rois_checked} ROI partitions, {density_checked} density checks, {elapsed:?} {problems:?}"),
    );
}

// ------------------------------------------------------------ 8, 9, 10

const EFFECTS: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

struct Sweep {
    outcomes: Vec<ExperimentOutcome>,
    elapsed: Duration,
}

/// The reference phantom (40^3, 9 ROIs, 3 affected, sigma 0.05, 30/30
/// training and 40 validation images), ladder {50,100,500}+original, F=20,
/// seed 0, at every effect size.
fn sweep() -> &'static Sweep {
    static CELL: OnceLock<Sweep> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let outcomes = EFFECTS
            .iter()
            .map(|&d| {
                let c = experiment_config(0, small_ladder(), 20, d);
                phantom_experiment(&c, &c.phantom_spec()).unwrap()
            })
            .collect();
        Sweep {
            outcomes,
            elapsed: start.elapsed(),
        }
    })
}

fn reference() -> &'static ExperimentOutcome {
    &sweep().outcomes[3]
}

#[test]
fn c08_phantom_end_to_end() {
    let sweep = sweep();
    let r = reference();
    let spec = PipelineConfig::default().phantom;
    let training = spec.subjects.snc + spec.subjects.sdat;
    let validation = spec.subjects.total() - training;
    let shape_ok = (spec.dims, spec.n_rois, spec.affected_rois.len(), spec.noise_sigma) == ([40; 3], 9, 3, 0.05)
        && (spec.subjects.snc, spec.subjects.sdat, validation) == (30, 30, 40)
        && r.heldout.len() == 40;
    let aucs: Vec<f64> = sweep.outcomes.iter().map(|o| o.heldout_auc).collect();
    let monotone = aucs.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let null_ok = (0.35..=0.65).contains(&aucs[0]);
    let strong_ok = aucs[3] >= 0.95;
    let fast = sweep.elapsed < Duration::from_secs(600);
    verdict(
        8,
        "phantom end-to-end",
        shape_ok && strong_ok && null_ok && monotone && fast,
        format!(
            "held-out AUC by d {:?}: d=2 >= 0.95 {strong_ok}, d=0 in [0.35,0.65] {null_ok}, monotone {monotone}, {training} training / {validation} validation, {:?}",
            EFFECTS.iter().zip(&aucs).map(|(d, a)| format!("{d}:{a:.3}")).collect::<Vec<_>>(),
            sweep.elapsed
        ),
    );
}

#[test]
fn c09_oob_honesty() {
    let r = reference();
    let gap = (r.oob_auc - r.heldout_auc).abs();
    let other: Vec<String> = sweep()
        .outcomes
        .iter()
        .zip(EFFECTS)
        .map(|(o, d)| format!("{d}:{:.3}", o.oob_auc - o.heldout_auc))
        .collect();
    verdict(
        9,
        "OOB honesty",
        gap <= 0.10,
        format!(
            "d=2 OOB AUC {:.4} on {} images vs held-out {:.4}, gap {gap:.4}; OOB - held-out by d {other:?}",
            r.oob_auc,
            r.oob.len(),
            r.heldout_auc
        ),
    );
}

#[test]
fn c10_selection_frequency() {
    let spec = PipelineConfig::default().phantom;
    let freq = |o: &ExperimentOutcome, roi: u32| {
        o.selection.iter().find(|f| f.roi_id == roi).map_or(0.0, |f| f.frequency)
    };
    let show = |o: &ExperimentOutcome| -> String {
        (1..=spec.n_rois as u32)
            .filter(|&r| r != spec.reference_roi)
            .map(|r| format!("{r}{}:{:.3}", if spec.affected_rois.contains(&r) { "*" } else { "" }, freq(o, r)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let r = reference();
    let ok = (1..=spec.n_rois as u32).filter(|&roi| roi != spec.reference_roi).all(|roi| {
        if spec.affected_rois.contains(&roi) {
            freq(r, roi) >= 0.8
        } else {
            freq(r, roi) <= 0.5
        }
    });
    verdict(
        10,
        "selection frequency",
        ok,
        format!(
            "reference ensemble (4x20): {}; for information, default ensemble (17x100): {}",
            show(r),
            show(full_ensemble())
        ),
    );
}

// ----------------------------------------------------------------- 11

fn midranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Two-sided p by enumerating every split of the pooled sample.
fn ranksum_enumerated(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let doubled: Vec<i64> = midranks(&pooled).iter().map(|r| (2.0 * r).round() as i64).collect();
    let n = pooled.len();
    let observed: i64 = doubled[..a.len()].iter().sum();
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let w: i64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| doubled[i]).sum();
        total += 1;
        le += (w <= observed) as u64;
        ge += (w >= observed) as u64;
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

fn pearson_permutation_p(x: &[f64], y: &[f64], draws: usize, rng: &mut impl Rng) -> f64 {
    let centre = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|a| a - m).collect::<Vec<_>>()
    };
    let (xc, mut yc) = (centre(x), centre(y));
    let norm = (xc.iter().map(|a| a * a).sum::<f64>() * yc.iter().map(|a| a * a).sum::<f64>()).sqrt();
    let r = |yc: &[f64]| xc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / norm;
    let observed = r(&yc).abs();
    let mut hits = 0usize;
    for _ in 0..draws {
        yc.shuffle(rng);
        hits += (r(&yc).abs() >= observed - 1e-12) as usize;
    }
    hits as f64 / draws as f64
}

#[test]
fn c11_statistics_oracles() {
    let mut rng = seed::rng(11);

    let mut pearson_worst = 0.0f64;
    for _ in 0..20 {
        let rho = rng.random_range(0.0..0.6);
        let x: Vec<f64> = (0..30).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().map(|v| rho * v + rng.sample::<f64, _>(StandardNormal)).collect();
        let p = pearson(&x, &y).unwrap().p;
        pearson_worst = pearson_worst.max((p - pearson_permutation_p(&x, &y, 100_000, &mut rng)).abs());
    }

    let exact_max_n = GroupTestOptions::default().exact_max_n;
    let (mut exact_worst, mut normal_worst) = (0.0f64, 0.0f64);
    for _ in 0..30 {
        let na = rng.random_range(2..=10);
        let nb = rng.random_range(2..=10);
        let levels = rng.random_range(3..=15);
        let shift = rng.random_range(0..=3);
        let a: Vec<f64> = (0..na).map(|_| (rng.random_range(0..levels) + shift) as f64).collect();
        let b: Vec<f64> = (0..nb).map(|_| rng.random_range(0..levels) as f64).collect();
        let oracle = ranksum_enumerated(&a, &b);
        exact_worst = exact_worst.max((ranksum_test(&a, &b, exact_max_n).unwrap().p - oracle).abs());
        normal_worst = normal_worst.max((ranksum_test(&a, &b, 0).unwrap().p - oracle).abs());
    }

    let run = run_a();
    assert_eq!(run.status, Some(0), "run-all failed: {}", run.stderr);
    let mut rows = 0;
    let mut bad = Vec::new();
    for entry in fs::read_dir(run.out.join("reports")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "csv") {
            continue;
        }
        for row in read_table(&path) {
            let Some(bal) = row.get("balanced_accuracy") else { break };
            if bal.is_empty() {
                continue;
            }
            rows += 1;
            let f = |k: &str| row[k].parse::<f64>().unwrap_or(f64::NAN);
            if !((f("balanced_accuracy") - (f("sensitivity") + f("specificity")) / 2.0).abs() <= 1e-12) {
                bad.push(format!("{}: {row:?}", path.display()));
            }
        }
    }

    verdict(
        11,
        "statistics oracles",
        pearson_worst <= 0.02 && exact_worst <= 0.03 && rows > 0 && bad.is_empty(),
        format!(
            "Pearson vs permutation max {pearson_worst:.4}; rank-sum vs enumeration max {exact_worst:.2e} (normal approximation {normal_worst:.4}); balanced accuracy consistent in {} of {rows} report rows",
            rows - bad.len()
        ),
    );
}

// ----------------------------------------------------------------- 12

#[test]
fn c12_determinism() {
    let (a, b) = (run_a(), run_b());
    assert_eq!(a.status, Some(0), "run-all failed: {}", a.stderr);
    assert_eq!(b.status, Some(0), "run-all failed: {}", b.stderr);
    let mut files = vec![PathBuf::from("model.fpds"), PathBuf::from("scores.csv")];
    let mut reports: Vec<PathBuf> = fs::read_dir(a.out.join("reports"))
        .unwrap()
        .map(|e| Path::new("reports").join(e.unwrap().file_name()))
        .collect();
    reports.sort();
    files.extend(reports);
    let differing: Vec<String> = files
        .iter()
        .filter(|f| fs::read(a.out.join(f)).unwrap() != fs::read(b.out.join(f)).ok().unwrap_or_default())
        .map(|f| f.display().to_string())
        .collect();
    verdict(
        12,
        "determinism",
        differing.is_empty() && files.len() >= 11,
        format!("{} files compared byte for byte, differing {differing:?}", files.len()),
    );
}
