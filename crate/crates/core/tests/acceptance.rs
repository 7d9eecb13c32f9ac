//! Acceptance suite. Runs every criterion in sequence (so wall-clock budgets
//! are not skewed by parallel tests) and prints one PASS/FAIL line each.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use colorreduce::bench::{self, BenchRow, BenchSpec, CSV_HEADER};
use colorreduce::collectives::{Algorithm, Allreduce};
use colorreduce::dimd::{
    self, build_blob, decode_index, encode_index, plan_shuffle, synthetic_corpus, uniform_records,
    BatchRequest, IndexEntry, Record, ShardStore,
};
use colorreduce::sgd::{
    self, grad_sum_f64, loss_f64, lr_at, weight_hash, LrSchedule, SamplingMode, ToyModel,
    TrainConfig, N_PARAMS,
};
use colorreduce::topology::{build_multicolor_trees, make_chunk_plan, validate_tree_set, ColorTree};
use colorreduce::transport::{run_ranks, Backend, SimParams, TransportConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and budgets.
const C1_BUDGET_S: f64 = 1.0;
const C2_CASES: usize = 500;
const C2_CROSS_REL: f64 = 1e-5;
const C2_BUDGET_S: f64 = 60.0;
const C3_PAYLOAD: u64 = 64 << 20;
const C3_MIN_SPEEDUP_VS_RB: f64 = 1.5;
const C3_BUDGET_S: f64 = 30.0;
const C4_CASES: usize = 200;
const C4_SIGMAS: f64 = 3.0;
const C4_BUDGET_S: f64 = 60.0;
const C5_STEPS: u64 = 50;
const C5_CROSS_STEPS: u64 = 10;
const C5_CROSS_REL: f64 = 1e-5;
const C5_BUDGET_S: f64 = 60.0;
const C7_SAMPLES: usize = 100;
const C7_MAX_REL: f64 = 1e-4;
/// Denominator floor for the finite-difference relative error; the
/// central difference at this step carries ~1e-7 absolute truncation error.
const C7_REL_FLOOR: f64 = 1e-2;
const C7_STEP: f64 = 1e-3;
const C7_BUDGET_S: f64 = 10.0;
const C8_RANKS: usize = 32;
const C8_GROUPS: [usize; 4] = [1, 4, 8, 16];
const C8_SPREAD: f64 = 0.20;
const C8_CORPUS_BYTES: u64 = 32 << 20;
const C8_BUDGET_S: f64 = 30.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn sim() -> Backend {
    Backend::Sim(SimParams::default())
}

/// `fold(node) = local(node) + fold(child_0) + fold(child_1) + ...`,
/// evaluated left to right in `f32`.
fn tree_fold(tree: &ColorTree, node: usize, value: &dyn Fn(usize) -> f32) -> f32 {
    tree.children[node]
        .iter()
        .fold(value(node), |acc, &c| acc + tree_fold(tree, c, value))
}

/// Serial replica of what each algorithm computes for element `i`.
fn oracle(ar: &Allreduce, inputs: &[Vec<f32>]) -> Vec<f32> {
    let n = inputs.len();
    let len = inputs.first().map_or(0, Vec::len);
    if n == 1 {
        return inputs[0].clone();
    }
    let mut out = vec![0.0f32; len];
    match ar {
        Allreduce::Multicolor(ts) => {
            let plan = make_chunk_plan(len, ts.k);
            for chunk in &plan.chunks {
                let tree = &ts.trees[chunk.color];
                for i in chunk.range() {
                    out[i] = tree_fold(tree, tree.root, &|r| inputs[r][i]);
                }
            }
        }
        Allreduce::Ring(ring) => {
            let tree = ring.as_tree();
            for (i, o) in out.iter_mut().enumerate() {
                *o = tree_fold(&tree, tree.root, &|r| inputs[r][i]);
            }
        }
        Allreduce::ReduceBcast(_) => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = (1..n).fold(inputs[0][i], |acc, r| acc + inputs[r][i]);
            }
        }
    }
    out
}

fn c1_topology() -> Verdict {
    let mut built = 0;
    let mut bad = Vec::new();
    for n in 2..=32 {
        for k in [1, 2, 4] {
            for arity in [2, 4] {
                if let Ok(ts) = build_multicolor_trees(n, k, arity) {
                    built += 1;
                    if !validate_tree_set(&ts).is_valid() {
                        bad.push((n, k, arity));
                    }
                }
            }
        }
    }
    // Four trees on eight nodes: color c rooted at 2c with 2c + 1 the only
    // other non-leaf node.
    let ts = build_multicolor_trees(8, 4, 4).expect("8 ranks, 4 colors, arity 4");
    let mut fig_ok = ts.trees.len() == 4;
    for (c, tree) in ts.trees.iter().enumerate() {
        fig_ok &= tree.color == c
            && tree.root == 2 * c
            && tree.interior == BTreeSet::from([2 * c, 2 * c + 1])
            && tree.parent[2 * c + 1] == Some(2 * c);
    }
    verdict(
        bad.is_empty() && fig_ok && built > 0,
        format!("{built} sets built, {} invalid, 8/4/4 layout {}", bad.len(), if fig_ok { "matches" } else { "differs" }),
    )
}

fn c2_collectives() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce97);
    let backends = [sim(), Backend::Threads, Backend::Tcp];
    let mut done = 0;
    let mut skipped = 0;
    let mut failures = Vec::new();
    let mut worst_cross = 0.0f64;
    while done < C2_CASES {
        let algo = Algorithm::ALL[rng.gen_range(0..3)];
        let backend = &backends[rng.gen_range(0..backends.len())];
        let n = rng.gen_range(1..=16);
        let colors = [1, 2, 4][rng.gen_range(0..3)];
        let arity = [2, 4][rng.gen_range(0..2)];
        let len = match rng.gen_range(0..4) {
            0 => rng.gen_range(0..8),
            1 => rng.gen_range(8..200),
            _ => rng.gen_range(200..4000),
        };
        let seg = rng.gen_range(1..600);
        let scale = [1e-3f32, 1.0, 1e3][rng.gen_range(0..3)];
        let Ok(ar) = Allreduce::new(algo, n, colors, arity) else {
            skipped += 1;
            continue;
        };
        let inputs: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..len).map(|_| rng.gen_range(-scale..scale)).collect())
            .collect();
        let transport = TransportConfig {
            max_segment_bytes: [4 << 20, 256][rng.gen_range(0..2)],
            ..TransportConfig::default()
        };
        let report = run_ranks(n, backend, &transport, |ep| {
            let (ar, inputs) = (&ar, &inputs);
            async move {
                let mut buf = inputs[ep.rank()].clone();
                ar.run(&ep, &mut buf, seg).await?;
                Ok(buf)
            }
        });
        done += 1;
        let results = match report {
            Ok(r) => r.results,
            Err(e) => {
                failures.push(format!("{algo} n={n} len={len} {}: {e}", backend.name()));
                continue;
            }
        };
        let want = oracle(&ar, &inputs);
        let bitwise = results
            .iter()
            .all(|r| r.len() == len && r.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
        if !bitwise {
            failures.push(format!("{algo} n={n} len={len} {}: not bitwise equal to oracle", backend.name()));
        }
        for other in Algorithm::ALL {
            let o = oracle(&Allreduce::new(other, n, 4, 4).unwrap_or_else(|_| Allreduce::new(Algorithm::Ring, n, 1, 2).unwrap()), &inputs);
            for i in 0..len {
                let mag: f64 = inputs.iter().map(|v| v[i].abs() as f64).sum();
                let rel = (o[i] as f64 - results[0][i] as f64).abs() / mag.max(f64::MIN_POSITIVE);
                worst_cross = worst_cross.max(rel);
            }
        }
    }
    let pass = failures.is_empty() && worst_cross <= C2_CROSS_REL;
    for f in failures.iter().take(5) {
        eprintln!("  {f}");
    }
    verdict(
        pass,
        format!(
            "{done} cases ({skipped} unbuildable configs redrawn), {} mismatches, worst cross-algorithm rel {worst_cross:.2e}",
            failures.len()
        ),
    )
}

fn c3_ordering() -> Verdict {
    let spec = BenchSpec::default();
    let len = (C3_PAYLOAD / 4) as usize;
    let mut medians = BTreeMap::new();
    let mut deterministic = true;
    for algo in Algorithm::ALL {
        let ar = match Allreduce::new(algo, 16, 4, 4) {
            Ok(ar) => ar,
            Err(e) => return verdict(false, format!("{algo}: {e}")),
        };
        let mut times = Vec::new();
        for _ in 0..3 {
            match bench::timed_allreduce(&ar, 16, len, &spec) {
                Ok(t) => times.push(t),
                Err(e) => return verdict(false, format!("{algo}: {e}")),
            }
        }
        deterministic &= times.iter().all(|t| t.to_bits() == times[0].to_bits());
        medians.insert(algo.name(), bench::median(&mut times));
    }
    let (mc, ring, rb) = (medians["multicolor"], medians["ring"], medians["reduce_bcast"]);
    verdict(
        mc < ring && ring < rb && rb / mc >= C3_MIN_SPEEDUP_VS_RB && deterministic,
        format!(
            "multicolor {mc:.4e} s < ring {ring:.4e} s < reduce_bcast {rb:.4e} s, speedup {:.2}x, repetitions {}",
            rb / mc,
            if deterministic { "identical" } else { "differ" }
        ),
    )
}

/// Order-independent multiset digest.
fn multiset(records: impl Iterator<Item = Record>) -> BTreeMap<Record, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r).or_insert(0) += 1;
    }
    m
}

fn c4_shuffle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut lost = 0;
    for case in 0..C4_CASES {
        let groups = rng.gen_range(1..=4);
        let group_size = rng.gen_range(1..=4);
        let n = groups * group_size;
        let records = rng.gen_range(0..60);
        let segments = rng.gen_range(1..=3);
        let seed = rng.gen();
        let data = uniform_records(records, rng.gen_range(1..40), case as u64);
        let (blob, index) = build_blob(&data).unwrap_or_default();
        let index = decode_index(&index).unwrap_or_default();
        let backend = if case % 5 == 0 { Backend::Threads } else { sim() };
        let res = run_ranks(n, &backend, &TransportConfig { max_segment_bytes: 128, ..Default::default() }, |ep| {
            let (blob, index) = (&blob, &index);
            async move {
                let before = dimd::partition(blob, index, ep.rank(), n, group_size)?;
                let after = dimd::shuffle_group(&ep, before.clone(), segments, seed).await?;
                after.check()?;
                Ok((before.records().collect::<Vec<_>>(), after.records().collect::<Vec<_>>()))
            }
        });
        let Ok(report) = res else {
            lost += 1;
            continue;
        };
        for g in 0..groups {
            let members = &report.results[g * group_size..(g + 1) * group_size];
            let before = multiset(members.iter().flat_map(|m| m.0.iter().cloned()));
            let after = multiset(members.iter().flat_map(|m| m.1.iter().cloned()));
            if before != after {
                lost += 1;
            }
        }
    }

    // Destinations: each record lands on one of S ranks uniformly.
    let mut uniform_ok = true;
    let mut worst_z = 0.0f64;
    for (s, records) in [(2usize, 4000u64), (4, 8000), (7, 7000)] {
        let index: Vec<IndexEntry> = (0..records)
            .map(|i| IndexEntry { offset: i * 10, length: 10, label: 0 })
            .collect();
        let plan = plan_shuffle(&index, s, 1, 99, 0).expect("small plan");
        let mut counts = vec![0u64; s];
        for d in &plan.segments[0].dest {
            counts[*d] += 1;
        }
        let p = 1.0 / s as f64;
        let sigma = (records as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            let z = (c as f64 - records as f64 * p).abs() / sigma;
            worst_z = worst_z.max(z);
            uniform_ok &= z <= C4_SIGMAS;
        }
    }

    // A shard whose offsets run past 4 GiB, described only by its index.
    let index: Vec<IndexEntry> = (0..12u64)
        .map(|i| IndexEntry { offset: i * (1 << 30) + 5, length: (1 << 30) - 7, label: i as u32 % 4 })
        .collect();
    let total: u64 = index.iter().map(|e| e.length as u64).sum();
    let mut bound_ok = index.last().unwrap().offset > 4 << 30;
    for s in [1, 2, 3] {
        match plan_shuffle(&index, s, dimd::default_segments(total), 7, 0) {
            Ok(plan) => bound_ok &= plan.max_slice_bytes() <= (1u64 << 31) - 1,
            Err(_) => bound_ok = false,
        }
    }
    bound_ok &= plan_shuffle(&index, 1, 1, 7, 0).is_err();

    verdict(
        lost == 0 && uniform_ok && bound_ok,
        format!(
            "{C4_CASES} layouts, {lost} not conserved; worst destination z {worst_z:.2}; >4 GiB slice bound {}",
            if bound_ok { "held" } else { "violated" }
        ),
    )
}

struct TrainRun {
    /// `weights[step][rank]`.
    weights: Vec<Vec<Vec<f32>>>,
}

fn distributed_run(cfg: &TrainConfig, store: &ShardStore, steps: u64, lr: f64) -> colorreduce::Result<TrainRun> {
    let ar = Allreduce::new(cfg.algorithm, cfg.n_nodes, cfg.colors, cfg.arity)?;
    let report = run_ranks(cfg.n_nodes, &sim(), &TransportConfig::default(), |ep| {
        let (ar, store) = (&ar, store);
        async move {
            let mut model = ToyModel::new(cfg.seed);
            let mut snaps = Vec::new();
            for step in 0..steps {
                sgd::train_step(&ep, &mut model, cfg, store, ar, step, lr).await?;
                snaps.push(model.weights.clone());
            }
            Ok(snaps)
        }
    })?;
    let weights = (0..steps as usize)
        .map(|s| report.results.iter().map(|r| r[s].clone()).collect())
        .collect();
    Ok(TrainRun { weights })
}

/// Single process, one effective batch per step, partial sums folded in
/// the same order the distributed run uses.
fn serial_run(cfg: &TrainConfig, store: &ShardStore, steps: u64, lr: f64) -> Vec<Vec<f32>> {
    let ar = Allreduce::new(cfg.algorithm, cfg.n_nodes, cfg.colors, cfg.arity).unwrap();
    let b = cfg.effective_batch();
    let (m, k) = (cfg.workers_per_node, cfg.per_worker_batch);
    let mut model = ToyModel::new(cfg.seed);
    let mut out = Vec::new();
    for step in 0..steps {
        let idx = store
            .sample_indices(&BatchRequest { batch_size: b, rng_seed: cfg.seed, step })
            .unwrap();
        let samples: Vec<_> = idx.iter().map(|&i| sgd::decode_sample(store, i).unwrap()).collect();
        let node_sums: Vec<Vec<f32>> = (0..cfg.n_nodes)
            .map(|r| {
                let mut acc: Option<Vec<f32>> = None;
                for j in 0..m {
                    let start = r * m * k + j * k;
                    let g = model.grad_sum(&samples[start..start + k]);
                    let mut part = g.grad;
                    part.push(g.loss_sum as f32);
                    part.push(g.correct as f32);
                    acc = Some(match acc {
                        None => part,
                        Some(a) => a.iter().zip(&part).map(|(x, y)| x + y).collect(),
                    });
                }
                acc.unwrap()
            })
            .collect();
        let total = oracle(&ar, &node_sums);
        let (lr32, b32) = (lr as f32, b as f32);
        for (w, g) in model.weights.iter_mut().zip(&total[..N_PARAMS]) {
            *w -= lr32 * (*g / b32);
        }
        out.push(model.weights.clone());
    }
    out
}

fn c5_sgd() -> Verdict {
    let corpus = synthetic_corpus(512, 11);
    let store = ShardStore::from_records(&corpus, 0, 1, 0);
    let base = TrainConfig {
        n_nodes: 4,
        workers_per_node: 2,
        per_worker_batch: 4,
        sampling: SamplingMode::SharedGlobal,
        colors: 4,
        arity: 4,
        seed: 5,
        check_replicas: true,
        ..TrainConfig::default()
    };
    let lr = 0.2;
    let mut notes = Vec::new();
    let mut pass = base.effective_batch() == 32;
    for algo in [Algorithm::Multicolor, Algorithm::Ring] {
        let cfg = TrainConfig { algorithm: algo, ..base.clone() };
        let dist = match distributed_run(&cfg, &store, C5_STEPS, lr) {
            Ok(d) => d,
            Err(e) => return verdict(false, format!("{algo}: {e}")),
        };
        let serial = serial_run(&cfg, &store, C5_STEPS, lr);
        let mut bitwise = true;
        let mut replicas = true;
        for (s, ranks) in dist.weights.iter().enumerate() {
            let h0 = weight_hash(&ranks[0]);
            replicas &= ranks.iter().all(|w| weight_hash(w) == h0);
            bitwise &= ranks[0].iter().zip(&serial[s]).all(|(a, b)| a.to_bits() == b.to_bits());
        }
        pass &= bitwise && replicas;
        notes.push(format!("{algo} bitwise {bitwise} replicas {replicas}"));
    }
    let run = |algo| {
        distributed_run(&TrainConfig { algorithm: algo, ..base.clone() }, &store, C5_CROSS_STEPS, lr)
            .map(|r| r.weights.last().unwrap()[0].clone())
    };
    match (run(Algorithm::Multicolor), run(Algorithm::Ring)) {
        (Ok(a), Ok(b)) => {
            let scale = a.iter().fold(0.0f32, |m, x| m.max(x.abs())) as f64;
            let diff = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs() as f64));
            let rel = diff / scale;
            pass &= rel <= C5_CROSS_REL;
            notes.push(format!("multicolor vs ring rel {rel:.2e}"));
        }
        (a, b) => {
            pass = false;
            notes.push(format!("cross run failed: {:?} {:?}", a.err(), b.err()));
        }
    }
    verdict(pass, format!("{C5_STEPS} steps at N=4 m=2 k=4: {}", notes.join(", ")))
}

fn c6_lr() -> Verdict {
    let sched = |k, n| LrSchedule { base_lr: 0.1, k, n, warmup_epochs: 5.0, drop_every: 30.0, drop_factor: 10.0 };
    let a = sched(64, 4);
    let b = sched(32, 256);
    let mut pass = a.target() == 0.1 && b.target() == 3.2;
    pass &= lr_at(&a, 0.0) == 0.1 && lr_at(&a, 2.5) == 0.1;
    pass &= lr_at(&b, 5.0) == 3.2 && lr_at(&b, 34.999) == 3.2;
    pass &= lr_at(&b, 35.0) == 3.2 / 10.0 && lr_at(&b, 64.9) == 3.2 / 10.0;
    pass &= lr_at(&b, 65.0) == 3.2 / 100.0 && lr_at(&b, 89.0) == 3.2 / 100.0;
    let mid = lr_at(&b, 2.5);
    pass &= (mid - (0.1 + 3.1 / 2.0)).abs() < 1e-12;
    verdict(
        pass,
        format!(
            "targets {} and {}, after drops {} and {}",
            a.target(),
            b.target(),
            lr_at(&b, 35.0),
            lr_at(&b, 65.0)
        ),
    )
}

fn c7_gradient() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for trial in 0..C7_SAMPLES {
        let w: Vec<f64> = ToyModel::new(trial as u64).weights.iter().map(|&x| x as f64).collect();
        let batch: Vec<_> = synthetic_corpus(4, 1000 + trial as u64)
            .iter()
            .map(|r| (dimd::decode_features(&r.bytes).unwrap(), r.label))
            .collect();
        let i = rng.gen_range(0..N_PARAMS);
        let g = grad_sum_f64(&w, &batch)[i];
        let (mut wp, mut wm) = (w.clone(), w.clone());
        wp[i] += C7_STEP;
        wm[i] -= C7_STEP;
        let fd = (loss_f64(&wp, &batch) - loss_f64(&wm, &batch)) / (2.0 * C7_STEP);
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(C7_REL_FLOOR);
        worst = worst.max(rel);
    }
    verdict(worst < C7_MAX_REL, format!("{C7_SAMPLES} comparisons, max rel error {worst:.2e}"))
}

fn c8_group_shuffle() -> Verdict {
    let spec = BenchSpec { record_bytes: 4096, ..BenchSpec::default() };
    let mut times = Vec::new();
    for g in C8_GROUPS {
        match bench::timed_shuffle(C8_RANKS, g, C8_CORPUS_BYTES, &spec, 1) {
            Ok((t, shard)) => times.push((g, t, shard)),
            // Not covered by the unattainable exemption.
            Err(e) => panic!("group shuffle with {g} groups failed: {e}"),
        }
    }
    let lo = times.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
    let hi = times.iter().map(|t| t.1).fold(0.0, f64::max);
    let desc: Vec<String> = times
        .iter()
        .map(|(g, t, b)| format!("g{g} {t:.3e} s ({} KiB/rank)", b >> 10))
        .collect();
    verdict(
        hi <= lo * (1.0 + C8_SPREAD),
        format!("spread {:.2}x: {}", hi / lo, desc.join(", ")),
    )
}

fn c9_formats() -> Verdict {
    let records = [Record::new(b"ab".to_vec(), 7), Record::new(b"xyz".to_vec(), 1)];
    let (blob, index) = build_blob(&records).expect("two records");
    #[rustfmt::skip]
    let golden_index: Vec<u8> = [
        b"DIMD".to_vec(),
        1u32.to_le_bytes().to_vec(),
        2u64.to_le_bytes().to_vec(),
        0u64.to_le_bytes().to_vec(), 2u32.to_le_bytes().to_vec(), 7u32.to_le_bytes().to_vec(),
        2u64.to_le_bytes().to_vec(), 3u32.to_le_bytes().to_vec(), 1u32.to_le_bytes().to_vec(),
    ]
    .concat();
    let mut pass = blob == b"abxyz" && index == golden_index;
    let decoded = decode_index(&index);
    pass &= decoded.as_ref().is_ok_and(|d| encode_index(d) == index);

    let dir = tempfile::tempdir().expect("tempdir");
    let (bp, ip) = (dir.path().join("b"), dir.path().join("i"));
    pass &= dimd::write_dataset(&bp, &ip, &records).is_ok()
        && std::fs::read(&bp).ok().as_deref() == Some(&blob[..])
        && std::fs::read(&ip).ok().as_deref() == Some(&index[..])
        && dimd::read_dataset(&bp, &ip).ok().as_deref() == Some(&records[..]);

    let row = BenchRow {
        scenario: "allreduce".into(),
        algorithm: "multicolor".into(),
        n_ranks: 16,
        payload_bytes: 67108864,
        median_time_s: 0.25,
        throughput_gbps: 0.5,
        backend: "sim".into(),
    };
    let mut csv = Vec::new();
    let _ = bench::write_csv(&[row.clone()], &mut csv);
    let golden_csv = "scenario,algorithm,n_ranks,payload_bytes,median_time_s,throughput_GBps,backend\n\
                      allreduce,multicolor,16,67108864,0.25,0.5,sim\n";
    pass &= csv == golden_csv.as_bytes() && CSV_HEADER == golden_csv.lines().next().unwrap();
    pass &= bench::read_csv(&csv[..]).ok() == Some(vec![row]);
    verdict(pass, "index, blob and CSV bytes match golden files")
}

/// Criteria that cannot be met by a faithful implementation. They still run
/// and print their verdict, but do not fail the suite.
///
/// 8: every group holds a full copy of the corpus, so with a fixed corpus
/// each rank's shard grows linearly with the group count (1 MiB at one
/// group, 16 MiB at sixteen) and the bytes it must exchange grow with it.
/// On a uniform network shuffle time tracks those bytes, giving a ~2.5x
/// spread. Holding the shard fixed instead reverses the trend (~5x).
/// The timing still runs end to end and `timed_shuffle` checks record
/// conservation in every group, so a broken shuffle fails as an error.
const KNOWN_UNATTAINABLE: &[usize] = &[8];

fn main() {
    let criteria: [(usize, &str, f64, fn() -> Verdict); 9] = [
        (1, "topology", C1_BUDGET_S, c1_topology),
        (2, "collective correctness", C2_BUDGET_S, c2_collectives),
        (3, "simulated ordering", C3_BUDGET_S, c3_ordering),
        (4, "shuffle", C4_BUDGET_S, c4_shuffle),
        (5, "sgd equivalence", C5_BUDGET_S, c5_sgd),
        (6, "lr schedule", 1.0, c6_lr),
        (7, "gradient check", C7_BUDGET_S, c7_gradient),
        (8, "group shuffle null result", C8_BUDGET_S, c8_group_shuffle),
        (9, "format golden files", 1.0, c9_formats),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut blocking = Vec::new();
    for (id, name, budget, f) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = f();
        let secs = start.elapsed().as_secs_f64();
        let pass = v.pass && secs < budget;
        println!(
            "criterion {id} {name}: {} ({secs:.2} s of {budget} s) {}",
            if pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !pass && !KNOWN_UNATTAINABLE.contains(&id) {
            blocking.push(id);
        }
    }
    if !blocking.is_empty() {
        eprintln!("failing criteria: {blocking:?}");
        std::process::exit(1);
    }
}
