//! End-to-end acceptance checks. Every criterion prints one PASS/FAIL line
//! to stderr (outside the test harness capture) and the test fails if any
//! criterion fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::ControlFlow;
use std::time::{Duration, Instant};

use fastre::attention::{aux_features, AttentionParams};
use fastre::data::{sample, Example, MatchMode, TripleKey, Vocab};
use fastre::encoder::{block_forward, encode, BlockOptions, BlockParams, Dropout, EncoderConfig, EncoderParams, SegmentLayout};
use fastre::loss::{at_loss, PositionLabels};
use fastre::model::{Ablation, Model, ModelConfig};
use fastre::numerics::gradcheck::{check_inputs, check_params, GradCheck};
use fastre::numerics::rng::{self, SeededRng};
use fastre::numerics::{ParamStore, Tape, Tensor, Var};
use fastre::runtime::{
    benchmark, count_params, evaluate_model, init_model, save_checkpoint, to_jsonl, train, BenchOptions, EpochMetrics, TrainConfig,
};
use fastre::tagger::{head_features, score_head, score_tail, EntityType, HeadFeatureTables, HeadRef, TaggerParams, TypeRelationMap};
use rand::Rng;

const GRAD_TOL: f64 = 1e-4;
const NO_DROPOUT: Option<&mut Dropout<'_, SeededRng>> = None;
const NO_RNG: Option<&mut SeededRng> = None;

type Outcome = Result<String, String>;

fn report(id: usize, name: &str, outcome: &Outcome) {
    let line = match outcome {
        Ok(detail) => format!("criterion {id} {name}: PASS ({detail})\n"),
        Err(detail) => format!("criterion {id} {name}: FAIL ({detail})\n"),
    };
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: fastre::Error) -> String {
    e.to_string()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    rng::uniform(shape, 1.0, &mut rng::seeded(seed))
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> fastre::Result<Var> {
    let w = tape.constant(rand_t(tape.value(y).shape(), seed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn record(results: &mut Vec<(String, GradCheck)>, name: &str, r: fastre::Result<GradCheck>) {
    let r = r.unwrap_or_else(|e| panic!("{name}: {e}"));
    results.push((name.to_string(), r));
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut results = Vec::new();
    let empty = ParamStore::<f64>::new();

    for dil in [1, 2, 4] {
        let inputs = [rand_t(&[9, 3], 1), rand_t(&[4, 3, 3], 2), rand_t(&[4], 3)];
        let r = check_inputs(&inputs, &empty, 64, |t, v| {
            let y = t.conv1d_dilated(v[0], v[1], v[2], dil, 9)?;
            probe(t, y, 7)
        });
        record(&mut results, &format!("conv1d_dilated d={dil}"), r);
    }

    let layout = SegmentLayout::new(&[6, 4]).unwrap();
    let mut store = ParamStore::<f64>::new();
    let block = BlockParams::init(&mut store, "b", 4, 3, &mut rng::seeded(4)).unwrap();
    for id in [block.conv_a_bias, block.conv_b_bias] {
        store.get_mut(id).value = rand_t(&[4], 5);
    }
    let x = rand_t(&[12, 4], 6);
    let f = |t: &mut Tape<f64>, x: Var| -> fastre::Result<Var> {
        let y = block_forward(t, x, &block, 2, &layout, BlockOptions::default(), NO_DROPOUT)?;
        probe(t, y, 8)
    };
    record(&mut results, "gated block (input)", check_inputs(std::slice::from_ref(&x), &store, 48, |t, v| f(t, v[0])));
    record(&mut results, "gated block (params)", check_params(&store, 24, |t| {
        let xv = t.constant(x.clone());
        f(t, xv)
    }));

    let mut store = ParamStore::<f64>::new();
    let attn = AttentionParams::init(&mut store, "attn", 4, &mut rng::seeded(9)).unwrap();
    for id in [attn.b_q, attn.b_k, attn.b_v] {
        store.get_mut(id).value = rand_t(&[4], 10);
    }
    let h = rand_t(&[12, 4], 11);
    let g = |t: &mut Tape<f64>, h: Var| -> fastre::Result<Var> {
        let y = aux_features(t, h, &attn, 1, &layout)?;
        probe(t, y, 12)
    };
    record(&mut results, "attention (input)", check_inputs(std::slice::from_ref(&h), &store, 48, |t, v| g(t, v[0])));
    record(&mut results, "attention (params)", check_params(&store, 24, |t| {
        let hv = t.constant(h.clone());
        g(t, hv)
    }));

    let mut store = ParamStore::<f64>::new();
    let mut r = rng::seeded(13);
    let head = TaggerParams::init(&mut store, "head", 4, 8, &mut r).unwrap();
    let tail = TaggerParams::init(&mut store, "tail", 3, 18, &mut r).unwrap();
    let tables = HeadFeatureTables::init(&mut store, 2, 4, 6, &mut r).unwrap();
    let refs = [
        HeadRef { sentence: 0, start: 1, end: 3, type_id: 0 },
        HeadRef { sentence: 1, start: 0, end: 0, type_id: 2 },
    ];
    let hh = rand_t(&[12, 4], 14);
    let ht = rand_t(&[12, 4], 15);
    let tagger = |t: &mut Tape<f64>, h: Var, h_head: Var, h_tail: Var| -> fastre::Result<Var> {
        let (s, e) = score_head(t, h, h_head, &head)?;
        let feats = head_features(t, h, &refs, 6, &tables)?;
        let (ts, te) = score_tail(t, h, h_tail, feats, &refs, 6, &tail)?;
        let parts = [probe(t, s, 16)?, probe(t, e, 17)?, probe(t, ts, 18)?, probe(t, te, 19)?];
        let a = t.add(parts[0], parts[1])?;
        let b = t.add(parts[2], parts[3])?;
        t.add(a, b)
    };
    let inputs = [h.clone(), hh.clone(), ht.clone()];
    record(&mut results, "tagger linears (input)", check_inputs(&inputs, &store, 48, |t, v| tagger(t, v[0], v[1], v[2])));
    record(&mut results, "tagger linears (params)", check_params(&store, 24, |t| {
        let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        tagger(t, v[0], v[1], v[2])
    }));

    let mut labels = PositionLabels::new(5);
    let mut lr = rng::seeded(20);
    for row in 0..8 {
        let active: Option<std::sync::Arc<[bool]>> =
            if row % 2 == 0 { None } else { Some((0..5).map(|c| c != 1).collect::<Vec<_>>().into()) };
        let positives: Vec<usize> = (0..5).filter(|&c| lr.gen_bool(0.3) && !(row % 2 == 1 && c == 1)).collect();
        labels.push(positives, active).unwrap();
    }
    let scores = rand_t(&[8, 6], 21).map(|v| 3.0 * v);
    record(&mut results, "at_loss", check_inputs(std::slice::from_ref(&scores), &empty, 64, |t, v| at_loss(t, v[0], &labels)));

    for ablation in [Ablation::default(), Ablation { global_threshold: true, ..Ablation::default() }] {
        let model = tiny_sample_model(ablation);
        let corpus = sample::corpus().unwrap().examples;
        let items: Vec<_> = [1, 2, 5].iter().map(|&i| model.prepare(&corpus[i]).unwrap()).collect();
        let batch: Vec<_> = items.iter().collect();
        let r = check_params(model.params(), 6, |t| model.batch_loss(t, &batch, NO_RNG).map(|(l, _)| l));
        let name = if ablation.global_threshold { "total_loss (global threshold)" } else { "total_loss" };
        record(&mut results, name, r);
    }

    let elapsed = start.elapsed();
    let worst = results
        .iter()
        .fold(("", 0.0f64), |w, (n, r)| if r.max_relative_error > w.1 { (n.as_str(), r.max_relative_error) } else { w });
    for (name, r) in &results {
        check(r.passes(GRAD_TOL), || format!("{name}: max relative error {:.3e} over {} entries", r.max_relative_error, r.checked))?;
    }
    check(elapsed < Duration::from_secs(60), || format!("suite took {elapsed:?}"))?;
    Ok(format!(
        "{} checks, worst {} at {:.2e}, {:.1}s",
        results.len(),
        worst.0,
        worst.1,
        elapsed.as_secs_f64()
    ))
}

fn tiny_sample_model(ablation: Ablation) -> Model<f64> {
    let glove = sample::glove();
    let corpus = sample::corpus().unwrap().examples;
    let vocab = Vocab::build(&corpus, &glove);
    let emb = vocab.embedding_matrix(&glove);
    let config = ModelConfig {
        encoder: EncoderConfig {
            hidden: 6,
            layers: 2,
            dilation_rates: vec![1, 2],
            glove_dim: glove.dim(),
            ..EncoderConfig::default()
        },
        type_dim: 3,
        ablation,
        ..ModelConfig::default()
    };
    Model::new(config, sample::map(), vocab, emb, 17).unwrap()
}

fn dependency_width(rates: Vec<usize>) -> usize {
    let config = EncoderConfig {
        layers: rates.len(),
        dilation_rates: rates,
        ..EncoderConfig::default()
    };
    let n = 61;
    let center = 30;
    let mut store = ParamStore::<f64>::new();
    let params = EncoderParams::init(&mut store, &config, &mut rng::seeded(3)).unwrap();
    let layout = SegmentLayout::new(&[n]).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.constant(rand_t(&[n, config.hidden], 4));
    let h = encode(&mut tape, x, &params, &config, &layout, BlockOptions::default(), NO_DROPOUT).unwrap();
    let row = tape.gather_rows(h, vec![center]).unwrap();
    let loss = probe(&mut tape, row, 5).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.wrt(x).unwrap();
    let touched: Vec<usize> = (0..n).filter(|&i| g.row(i).iter().any(|v| *v != 0.0)).collect();
    let contiguous = touched.windows(2).all(|w| w[1] == w[0] + 1);
    assert!(contiguous, "dependency set is not contiguous: {touched:?}");
    touched.len()
}

fn receptive_field() -> Outcome {
    let dilated = dependency_width(vec![1, 2, 4, 1, 1, 1]);
    let plain = dependency_width(vec![1; 6]);
    check(dilated == 21, || format!("dilated width {dilated}, expected 21"))?;
    check(plain == 13, || format!("all-ones width {plain}, expected 13"))?;
    Ok(format!("widths {dilated} and {plain}"))
}

struct Run {
    model: Model,
    metrics: Vec<EpochMetrics>,
    first_perfect: Option<usize>,
    elapsed: Duration,
}

fn overfit_run(ablation: Ablation, stop_after: Option<usize>) -> fastre::Result<Run> {
    let corpus = sample::corpus()?.examples;
    let mut config = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    config.model.ablation = ablation;
    let start = Instant::now();
    let mut model = init_model(&corpus, &sample::map(), &sample::glove(), &config)?;
    let mut first_perfect = None;
    let report = train(&mut model, &corpus, &config, |m, _| {
        if m.f1 == 1.0 && first_perfect.is_none() {
            first_perfect = Some(m.epoch);
        }
        match stop_after {
            Some(limit) if first_perfect.is_some() || m.epoch >= limit => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        }
    })?;
    Ok(Run {
        model,
        metrics: report.metrics,
        first_perfect,
        elapsed: start.elapsed(),
    })
}

fn overfit(run: &Run) -> Outcome {
    let corpus = sample::corpus().map_err(err)?.examples;
    let final_f1 = evaluate_model(&run.model, &corpus, MatchMode::Partial, 32).map_err(err)?.f1;
    let first = run.first_perfect.ok_or_else(|| {
        format!("never reached F1 = 1.0; best {:.4}", run.metrics.iter().map(|m| m.f1).fold(0.0, f64::max))
    })?;
    check(first <= 200, || format!("first perfect epoch {first}"))?;
    check(final_f1 == 1.0, || format!("final train F1 {final_f1}"))?;
    check(run.elapsed < Duration::from_secs(300), || format!("took {:?}", run.elapsed))?;
    Ok(format!(
        "F1 = 1.0 first at epoch {first}, final F1 {final_f1}, {} epochs in {:.1}s",
        run.metrics.len(),
        run.elapsed.as_secs_f64()
    ))
}

fn decode_consistency(model: &Model) -> Outcome {
    let corpus = sample::corpus().map_err(err)?.examples;
    let mut missing = Vec::new();
    let mut extra = 0;
    for (i, ex) in corpus.iter().enumerate() {
        let pred: Vec<TripleKey> = model.extract(&ex.tokens).map_err(err)?.iter().map(|t| TripleKey::from_triple(t, model.map())).collect();
        for g in &ex.triples {
            if !pred.contains(&TripleKey::from(g)) {
                missing.push(format!("sentence {i}: {g:?}"));
            }
        }
        extra += pred.iter().filter(|p| !ex.triples.iter().any(|g| TripleKey::from(g) == **p)).count();
    }
    check(missing.is_empty(), || format!("{} gold triples not decoded, e.g. {}", missing.len(), missing[0]))?;
    let gold: usize = corpus.iter().map(|e| e.triples.len()).sum();
    Ok(format!("all {gold} gold triples decoded exactly, {extra} extra"))
}

fn toy_model(seed: u64, ablation: Ablation) -> Model<f64> {
    let vocab = Vocab::from_tokens(["a", "b", "c", "d", "e", "f"].map(String::from)).unwrap();
    let config = ModelConfig {
        encoder: EncoderConfig {
            hidden: 8,
            layers: 2,
            dilation_rates: vec![1, 2],
            max_len: 16,
            glove_dim: 4,
            ..EncoderConfig::default()
        },
        type_dim: 4,
        ablation,
        ..ModelConfig::default()
    };
    let emb = rng::uniform(&[vocab.len(), 4], 1.0, &mut rng::seeded(seed ^ 0x5eed));
    Model::new(config, sample::map(), vocab, emb, seed).unwrap()
}

/// Randomises the tagger weights at a scale where many heads and tails fire.
fn loud(mut m: Model<f64>, seed: u64) -> Model<f64> {
    let ids = m.ids().clone();
    let mut r = rng::seeded(seed.wrapping_mul(31) + 1);
    for id in [ids.head.start_weight, ids.head.end_weight, ids.tail.start_weight, ids.tail.end_weight] {
        let shape = m.params().get(id).value.shape().to_vec();
        m.params_mut().get_mut(id).value = rng::uniform(&shape, 3.0, &mut r);
    }
    m
}

/// Every position is a head of every type and a tail of every relation.
fn adversarial(ablation: Ablation) -> Model<f64> {
    let mut m = toy_model(0, ablation);
    for p in m.params_mut().iter_mut() {
        p.value.fill(0.0);
    }
    let ids = m.ids().clone();
    let n = m.map().num_relations();
    for (bias, classes) in [
        (ids.head.start_bias, EntityType::COUNT),
        (ids.head.end_bias, EntityType::COUNT),
        (ids.tail.start_bias, n),
        (ids.tail.end_bias, n),
    ] {
        let b = m.params_mut().get_mut(bias).value.data_mut();
        b[..classes].iter_mut().for_each(|v| *v = 1.0);
    }
    m
}

fn violations(m: &Model<f64>, batch: &[Vec<usize>]) -> (usize, usize) {
    let mut emitted = 0;
    let mut bad = 0;
    for e in m.extract_ids(batch).unwrap() {
        for t in &e.triples {
            emitted += 1;
            if !m.map().forward(t.head_type()).contains(&t.relation) {
                bad += 1;
            }
        }
    }
    (emitted, bad)
}

fn mapping_soundness() -> Outcome {
    let mut emitted = 0;
    let mut bad = 0;
    let mut ablated = (0, 0);
    for seed in 0..1000u64 {
        let mut r = rng::seeded(seed);
        let len = r.gen_range(1..=16);
        let sentence: Vec<usize> = (0..len).map(|_| r.gen_range(0..7)).collect();
        let batch = [sentence];
        let (e, b) = violations(&loud(toy_model(seed, Ablation::default()), seed), &batch);
        emitted += e;
        bad += b;
        let off = Ablation { no_mapping: true, ..Ablation::default() };
        let (e, b) = violations(&loud(toy_model(seed, off), seed), &batch);
        ablated.0 += e;
        ablated.1 += b;
    }
    check(emitted > 0, || "randomised models emitted no triples".into())?;
    check(bad == 0, || format!("{bad} of {emitted} triples violate the map"))?;

    let batch = [vec![1, 2, 3, 4, 5, 6]];
    let (fe, fb) = violations(&adversarial(Ablation::default()), &batch);
    check(fe > 0 && fb == 0, || format!("adversarial fixture with mapping: {fb} of {fe} violate"))?;
    let (ae, ab) = violations(&adversarial(Ablation { no_mapping: true, ..Ablation::default() }), &batch);
    check(ab > 0, || format!("no_mapping adversarial fixture emitted {ae} triples, none violating"))?;
    Ok(format!(
        "0 of {emitted} random triples violate; no_mapping violates {}/{} on random models and {ab}/{ae} on the adversarial fixture",
        ablated.1, ablated.0
    ))
}

fn relation_map(n: usize) -> TypeRelationMap {
    let mut entries = BTreeMap::new();
    for i in 0..n {
        entries.entry(EntityType::ALL[i % EntityType::COUNT]).or_insert_with(Vec::new).push(format!("rel{i}"));
    }
    TypeRelationMap::new(&entries).unwrap()
}

fn parameter_scale() -> Outcome {
    let count = |n: usize| {
        let vocab = Vocab::from_tokens(["x".to_string()]).unwrap();
        let m = Model::<f32>::new(ModelConfig::default(), relation_map(n), vocab, Tensor::zeros([2, 300]), 0).unwrap();
        count_params(m.params()).total
    };
    let total = count(29);
    let delta = count(30) - total;
    check((700_000..=1_300_000).contains(&total), || format!("{total} parameters"))?;
    check(total * 50 < 110_000_000, || format!("{total} is not below 110M / 50"))?;
    check(delta == 2 * (4 * 128 + 64 + 1), || format!("per-relation delta {delta}"))?;
    Ok(format!("{total} parameters, per-relation delta {delta}"))
}

fn throughput(model: &Model) -> Outcome {
    let corpus: Vec<Example> = sample::sentences(500)
        .map_err(err)?
        .into_iter()
        .map(|tokens| Example { tokens, triples: Vec::new() })
        .collect();
    let opts = BenchOptions {
        batch_sizes: vec![1, 8, 128],
        repetitions: 3,
        ..BenchOptions::default()
    };
    let report = benchmark(model, &corpus, &opts).map_err(err)?;
    let ms: Vec<f64> = report.single_thread.iter().map(|e| e.ms_per_instance).collect();
    let shown = ms.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" / ");
    check(ms.len() == 3 && ms[0] > ms[1] && ms[1] > ms[2], || format!("ms per sentence {shown}"))?;
    Ok(format!("{} sentences, ms per sentence {shown}", corpus.len()))
}

fn adaptive_vs_global(adaptive: &Run) -> Outcome {
    let a = adaptive.first_perfect.ok_or("adaptive run never reached F1 = 1.0")?;
    let global = overfit_run(Ablation { global_threshold: true, ..Ablation::default() }, Some(200)).map_err(err)?;
    // both runs take two optimizer steps per epoch on this corpus
    match global.first_perfect {
        Some(g) => {
            check(a <= g, || format!("adaptive needs {} steps, global {}", 2 * a, 2 * g))?;
            Ok(format!("adaptive {} steps, global threshold {} steps", 2 * a, 2 * g))
        }
        None => Ok(format!(
            "adaptive {} steps, global threshold not perfect within {} epochs (best F1 {:.4})",
            2 * a,
            global.metrics.len(),
            global.metrics.iter().map(|m| m.f1).fold(0.0, f64::max)
        )),
    }
}

fn determinism() -> Outcome {
    let corpus = sample::corpus().map_err(err)?.examples;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |k: usize| -> fastre::Result<(Vec<u8>, String)> {
        let config = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let mut model = init_model(&corpus, &sample::map(), &sample::glove(), &config)?;
        let report = train(&mut model, &corpus, &config, |_, _| ControlFlow::Continue(()))?;
        let path = dir.path().join(format!("run{k}.fre"));
        save_checkpoint(&model, &path)?;
        Ok((std::fs::read(&path).expect("checkpoint was written"), to_jsonl(&report.metrics)?))
    };
    let (ckpt_a, log_a) = run(0).map_err(err)?;
    let (ckpt_b, log_b) = run(1).map_err(err)?;
    check(ckpt_a == ckpt_b, || "checkpoints differ".into())?;
    check(log_a == log_b, || "metrics logs differ".into())?;
    Ok(format!("{} checkpoint bytes and {} metric lines identical", ckpt_a.len(), log_a.lines().count()))
}

#[test]
fn acceptance() {
    let mut outcomes: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut push = |id, name, outcome: Outcome| {
        report(id, name, &outcome);
        outcomes.push((id, name, outcome));
    };

    push(1, "gradient suite", gradient_suite());
    push(2, "receptive field", receptive_field());
    let run = overfit_run(Ablation::default(), None);
    match &run {
        Ok(run) => {
            push(3, "overfit", overfit(run));
            push(4, "decode/loss consistency", decode_consistency(&run.model));
        }
        Err(e) => {
            push(3, "overfit", Err(e.to_string()));
            push(4, "decode/loss consistency", Err("no trained model".into()));
        }
    }
    push(5, "mapping soundness", mapping_soundness());
    push(6, "parameter scale", parameter_scale());
    match &run {
        Ok(run) => {
            push(7, "throughput trend", throughput(&run.model));
            push(8, "adaptive threshold value", adaptive_vs_global(run));
        }
        Err(_) => {
            push(7, "throughput trend", Err("no trained model".into()));
            push(8, "adaptive threshold value", Err("no trained model".into()));
        }
    }
    push(9, "determinism", determinism());
    let _ = std::io::stderr().write_all(
        b"criterion 10 full-scale benchmark scores: NOT RUN (needs the external corpora; reference targets are documented in the README)\n",
    );

    let failed: Vec<_> = outcomes.iter().filter(|o| o.2.is_err()).map(|o| o.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
