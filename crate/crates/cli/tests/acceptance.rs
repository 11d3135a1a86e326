//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 3 7`.

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repsnet::contrastive::{encoder_loss, info_nce_directional, ContrastiveConfig};
use repsnet::data::{
    filter_min_occurrence, generate_synthetic, AnswerType, Batch, Dataset, Record, Split, SynthMode, SynthSpec,
    TokenId, Vocab, BOS, EOS, PAD,
};
use repsnet::decoder::{
    beam_decode, greedy_decode, has_no_repeated_ngram, multimodal_attention, AttentionParams, Decoder,
    DecoderConfig, GenerationConstraints,
};
use repsnet::encoder::{Encoder, EncoderConfig};
use repsnet::eval::{evaluate, strip_specials};
use repsnet::metrics::{bleu_n, corpus_eval, BleuMode, SMOOTHING_EPSILON};
use repsnet::retrieval::AnswerIndex;
use repsnet::tensor::{grad_check, grad_check_params, AdamW, ParamSet, Reduction, Tape, Tensor, Var};
use repsnet::vqa::{accuracy_eval, AnswerVocab, ClassifierHead};
use repsnet::{Config, RepsNet, Result};

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(budget: Duration, start: Instant, detail: String) -> Outcome {
    let spent = start.elapsed();
    ensure(spent < budget, format!("{detail}; {:.1}s of {}s budget", spent.as_secs_f64(), budget.as_secs()))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// `sum(y * c)` for a fixed random `c`, turning any tensor into a scalar
/// with a dense gradient.
fn probe_sum(t: &mut Tape<'_>, y: Var, c: &Tensor) -> Result<Var> {
    let c = t.constant(c.clone());
    let m = t.mul(y, c)?;
    t.sum(m)
}

fn sampled_coords(ps: &ParamSet, per_param: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (id, _, v) in ps.iter() {
        let n = v.numel();
        if n <= per_param {
            out.extend((0..n).map(|j| (id.index(), j)));
        } else {
            out.extend((0..per_param).map(|_| (id.index(), rng.random_range(0..n))));
        }
    }
    out
}

// ---------------------------------------------------------------- 1

fn gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let w = randn(&[4, 3], &mut rng);
    let c = randn(&[5, 3], &mut rng);
    let x = randn(&[5, 4], &mut rng);
    out.push((
        "matmul",
        grad_check(
            |t, x| {
                let w = t.constant(w.clone());
                let y = t.matmul(x, w)?;
                probe_sum(t, y, &c)
            },
            &x,
            h,
        )?,
    ));

    let c = randn(&[3, 6], &mut rng);
    let x = randn(&[3, 6], &mut rng);
    out.push((
        "softmax",
        grad_check(
            |t, x| {
                let y = t.softmax(x)?;
                probe_sum(t, y, &c)
            },
            &x,
            h,
        )?,
    ));

    let (g, b) = (randn(&[6], &mut rng), randn(&[6], &mut rng));
    out.push((
        "layer_norm",
        grad_check(
            |t, x| {
                let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
                let y = t.layer_norm(x, g, b)?;
                probe_sum(t, y, &c)
            },
            &x,
            h,
        )?,
    ));

    // bilinear fusion: glimpse weights plus both inputs as parameters
    let cfg = EncoderConfig {
        image_height: 8,
        image_width: 8,
        d_x: 6,
        d_q: 4,
        d: 4,
        ban_rank: 3,
        text_layers: 1,
        vocab_size: 10,
        text_max_len: 8,
        ..EncoderConfig::default()
    };
    let mut ps = ParamSet::new();
    let enc = Encoder::new(cfg, &mut ps, &mut rng)?;
    for gl in enc.glimpse_params() {
        let shape = ps.get(gl.w).shape().to_vec();
        *ps.get_mut(gl.w) = Tensor::randn(&shape, 0.5, &mut rng);
    }
    let xi = ps.add("probe.x", randn(&[4, 6], &mut rng))?;
    let qi = ps.add("probe.q", randn(&[3, 4], &mut rng))?;
    let c = randn(&[4, 6], &mut rng);
    let coords: Vec<(usize, usize)> = ps
        .iter()
        .filter(|(_, name, _)| name.starts_with("enc.ban") || name.starts_with("probe"))
        .flat_map(|(id, _, v)| (0..v.numel()).map(move |j| (id.index(), j)))
        .collect();
    out.push((
        "ban_fusion",
        grad_check_params(
            |t| {
                let (x, q) = (t.param(xi)?, t.param(qi)?);
                let f = enc.ban_fuse(t, x, q, &[true, true, false])?;
                probe_sum(t, f, &c)
            },
            &ps,
            h,
            Some(&coords),
        )?,
    ));

    let other = randn(&[4, 5], &mut rng);
    let x = randn(&[4, 5], &mut rng);
    let ccfg = ContrastiveConfig { temperature: 0.5, weight: 1.0 };
    out.push((
        "encoder_loss",
        grad_check(
            |t, v| {
                let a = t.l2_normalize_rows(v)?;
                let o = t.constant(other.clone());
                let b = t.l2_normalize_rows(o)?;
                encoder_loss(t, a, b, &ccfg)
            },
            &x,
            h,
        )?,
    ));

    let mut ps = ParamSet::new();
    let ap = AttentionParams::new(&mut ps, "a", 6, 4, &mut rng)?;
    let yi = ps.add("probe.y", randn(&[4, 6], &mut rng))?;
    let xi = ps.add("probe.x", randn(&[3, 4], &mut rng))?;
    let ci = ps.add("probe.c", randn(&[5, 6], &mut rng))?;
    let c = randn(&[4, 6], &mut rng);
    out.push((
        "multimodal_attention",
        grad_check_params(
            |t| {
                let (y, x, ctx) = (t.param(yi)?, t.param(xi)?, t.param(ci)?);
                let o = multimodal_attention(t, &ap, 2, y, Some(x), Some(ctx))?;
                probe_sum(t, o, &c)
            },
            &ps,
            h,
            None,
        )?,
    ));

    let dcfg = DecoderConfig {
        layers: 2,
        heads: 2,
        width: 8,
        max_len: 12,
        vocab_size: 10,
        d_x: 4,
    };
    let mut ps = ParamSet::new();
    let dec = Decoder::new(dcfg, &mut ps, &mut rng)?;
    let xs = [randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng)];
    let answers: [&[TokenId]; 2] = [&[BOS, 4, 7, 5, EOS], &[BOS, 6, 9, EOS, PAD]];
    let contexts = [vec![vec![BOS, 7, 5, EOS]], vec![vec![BOS, 8, EOS]]];
    let coords = sampled_coords(&ps, 4, &mut rng);
    out.push((
        "teacher_forced_loss",
        grad_check_params(
            |t| {
                let mut items = Vec::new();
                for i in 0..2 {
                    let x = t.constant(xs[i].clone());
                    let c = dec.embed_context(t, &contexts[i])?;
                    items.push((answers[i], Some(x), c));
                }
                dec.teacher_forced_loss(t, &items)
            },
            &ps,
            h,
            Some(&coords),
        )?,
    ));

    let mut ps = ParamSet::new();
    let head = ClassifierHead::new(&mut ps, 6, 5, 4, &mut rng)?;
    let out_w = ps.id("vqa.out.weight").expect("classifier output weight");
    *ps.get_mut(out_w) = Tensor::randn(&[5, 4], 0.5, &mut rng);
    let pooled = randn(&[3, 6], &mut rng);
    out.push((
        "classifier_ce",
        grad_check_params(
            |t| {
                let p = t.constant(pooled.clone());
                let l = head.forward(t, p)?;
                t.cross_entropy(l, &[Some(1), Some(3), Some(0)], Reduction::Mean)
            },
            &ps,
            h,
            None,
        )?,
    ));
    Ok(out)
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: HashMap<&str, f64> = HashMap::new();
    for seed in 0..10 {
        for (op, err) in gradient_errors(seed).map_err(|e| e.to_string())? {
            let w = worst.entry(op).or_insert(0.0);
            *w = w.max(err);
        }
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let mut ops: Vec<_> = worst.into_iter().collect();
    ops.sort_by(|a, b| a.0.cmp(b.0));
    let failing: Vec<_> = ops.iter().filter(|(_, e)| *e >= 1e-4).map(|(o, _)| *o).collect();
    if !failing.is_empty() {
        return Err(format!("relative error >= 1e-4 for {failing:?}"));
    }
    within(
        Duration::from_secs(60),
        start,
        format!("{} ops x 10 seeds, worst relative error {max:.2e}", ops.len()),
    )
}

// ---------------------------------------------------------------- 2

fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
    let normed: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    Tensor::from_rows(&normed).unwrap()
}

fn contrastive_value(x: &Tensor, y: &Tensor, tau: f64, both: bool) -> f64 {
    let mut t = Tape::detached();
    let (a, b) = (t.constant(x.clone()), t.constant(y.clone()));
    let l = if both {
        encoder_loss(&mut t, a, b, &ContrastiveConfig { temperature: tau, weight: 1.0 }).unwrap()
    } else {
        info_nce_directional(&mut t, a, b, tau).unwrap()
    };
    t.value(l).item().unwrap()
}

fn c2_contrastive_oracle() -> Outcome {
    let single = unit_rows(&[vec![0.2, -0.5, 0.9]]);
    let other = unit_rows(&[vec![1.0, 1.0, 0.0]]);
    let zero = contrastive_value(&single, &other, 0.07, true);
    let eye = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let ortho = contrastive_value(&eye, &eye, 1.0, false);
    let ortho_expect = (1.0 + (-1.0f64).exp()).ln();
    let mut collapsed_err = 0.0f64;
    for n in [2usize, 4, 8] {
        let x = unit_rows(&vec![vec![0.3, 0.4, -0.2]; n]);
        let y = unit_rows(&vec![vec![-1.0, 0.5, 0.5]; n]);
        collapsed_err = collapsed_err.max((contrastive_value(&x, &y, 0.07, false) - (n as f64).ln()).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut swap_exact = true;
    for n in 1..=6 {
        let rows = |rng: &mut ChaCha8Rng| (0..n).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<Vec<f64>>>();
        let (x, y) = (unit_rows(&rows(&mut rng)), unit_rows(&rows(&mut rng)));
        swap_exact &= contrastive_value(&x, &y, 0.07, true).to_bits() == contrastive_value(&y, &x, 0.07, true).to_bits();
    }
    ensure(
        zero == 0.0 && (ortho - ortho_expect).abs() < 1e-9 && collapsed_err < 1e-9 && swap_exact,
        format!(
            "N=1 -> {zero}; orthonormal {ortho:.12} vs {ortho_expect:.12}; collapsed err {collapsed_err:.1e}; swap bit-exact {swap_exact}"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn train_open_model(spec: &SynthSpec, synth_seed: u64, config: Config) -> (RepsNet, repsnet::data::SyntheticCorpus) {
    let corpus = generate_synthetic(spec, synth_seed).unwrap();
    let mut model = RepsNet::new(config, corpus.vocab.clone(), None).unwrap();
    model.fit(&corpus.train, |_| {}).unwrap();
    if model.config.k > 0 {
        model.index = Some(model.build_index(&corpus.train).unwrap());
    }
    (model, corpus)
}

fn c3_contrastive_training() -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec { mode: SynthMode::Open, ..SynthSpec::default() };
    let config = Config { seed: 1, epochs: 200, lr: 5e-4, ..Config::default() };
    let (model, corpus) = train_open_model(&spec, 7, config);
    let concept_of: HashMap<&str, usize> = corpus
        .train
        .iter()
        .zip(corpus.train_concepts())
        .map(|(s, &c)| (s.id.as_str(), c))
        .collect();
    let mut hits = 0;
    for (s, &concept) in corpus.eval.iter().zip(corpus.eval_concepts()) {
        let enc = model.encode(&s.image, &s.question).unwrap();
        let top = &model.retrieve(&enc, 1).unwrap()[0];
        hits += usize::from(concept_of[top.id.as_str()] == concept);
    }
    let n = corpus.eval.len();
    let acc = hits as f64 / n as f64;
    if acc < 0.9 {
        return Err(format!("top-1 concept accuracy {hits}/{n} = {acc:.3} < 0.9"));
    }
    within(
        Duration::from_secs(300),
        start,
        format!("top-1 concept accuracy {hits}/{n} = {acc:.3} after 200 epochs (chance 0.25)"),
    )
}

// ---------------------------------------------------------------- 4

fn brute_force(rows: &[Vec<f64>], q: &[f64], k: usize) -> Vec<usize> {
    let qn: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut scored: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let rn: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut s = 0.0;
            for (a, b) in q.iter().zip(r) {
                s += (a / qn) * (b / rn);
            }
            (i, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    scored.into_iter().take(k).map(|(i, _)| i).collect()
}

fn c4_retrieval_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut rows = |n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    };
    let data = rows(1000);
    let queries = rows(25);
    let mut idx = AnswerIndex::new(16).unwrap();
    for (i, r) in data.iter().enumerate() {
        idx.add(r, vec![BOS, 4 + i as TokenId, EOS], format!("r{i}")).unwrap();
    }
    let mut mismatches = 0;
    for q in &queries {
        for k in [1, 5, 50] {
            let got: Vec<usize> = idx.topk(q, k).unwrap().iter().map(|n| n.row).collect();
            mismatches += usize::from(got != brute_force(&data, q, k));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("answers.rnix");
    idx.save(&path).unwrap();
    let back = AnswerIndex::load(&path).unwrap();
    let bit_exact = (0..idx.len()).all(|i| {
        idx.row(i).iter().map(|v| v.to_bits()).eq(back.row(i).iter().map(|v| v.to_bits()))
            && idx.tokens(i) == back.tokens(i)
            && idx.id(i) == back.id(i)
    }) && back.to_bytes() == idx.to_bytes();
    ensure(
        mismatches == 0 && bit_exact,
        format!("{mismatches} mismatches over 25 queries x k in {{1,5,50}}; round trip bit-exact {bit_exact}"),
    )
}

// ---------------------------------------------------------------- 5 and 6

struct Memorized {
    model: RepsNet,
    train: Dataset,
    steps: usize,
    loss: f64,
    spent: Duration,
}

fn memorize() -> Memorized {
    let start = Instant::now();
    let spec = SynthSpec {
        samples: 10,
        mode: SynthMode::Open,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic(&spec, 5).unwrap();
    let config = Config {
        seed: 2,
        lr: 1e-3,
        augment: false,
        ..Config::default()
    };
    let mut model = RepsNet::new(config, corpus.vocab.clone(), None).unwrap();
    let train = corpus.train;
    let batch = Batch::from_indices(&train, &(0..train.len()).collect::<Vec<_>>()).unwrap();
    let mut opt = AdamW::new(&model.params, model.config.optimizer());
    let mut steps = 0;
    let mut loss = model.batch_loss(&batch, 0).unwrap().generation;
    while loss >= 0.01 && steps < 3000 {
        model.train_step(&mut opt, &batch, 0).unwrap();
        steps += 1;
        loss = model.batch_loss(&batch, 0).unwrap().generation;
    }
    Memorized {
        model,
        train,
        steps,
        loss,
        spent: start.elapsed(),
    }
}

fn c5_memorization(m: &Memorized) -> Outcome {
    if m.loss >= 0.01 {
        return Err(format!("teacher-forced loss {:.4} after {} steps", m.loss, m.steps));
    }
    let mut exact = 0;
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for s in m.train.iter() {
        let enc = m.model.encode(&s.image, &s.question).unwrap();
        let out = m.model.decode_with_context(&enc.fused, &[s.answer_tokens().to_vec()]).unwrap();
        let reference = strip_specials(s.answer_tokens());
        exact += usize::from(out == reference);
        hyps.push(out);
        refs.push(reference);
    }
    let pairs: Vec<(&[TokenId], &[TokenId])> = hyps.iter().zip(&refs).map(|(h, r)| (&h[..], &r[..])).collect();
    let bleu = corpus_eval(&pairs, BleuMode::Cumulative).unwrap();
    ensure(
        exact == m.train.len() && bleu.b4 >= 0.9 && m.spent < Duration::from_secs(300),
        format!(
            "loss {:.4} after {} steps in {:.1}s; {exact}/{} exact; B4 {:.4}",
            m.loss,
            m.steps,
            m.spent.as_secs_f64(),
            m.train.len(),
            bleu.b4
        ),
    )
}

fn c6_conditioning(m: &Memorized) -> Outcome {
    let samples = m.train.samples();
    let n = samples.len();
    let mut increased = 0;
    for (i, s) in samples.iter().enumerate() {
        // next sample (cyclically) whose answer differs
        let wrong = (1..n)
            .map(|d| &samples[(i + d) % n])
            .find(|o| o.answer_tokens() != s.answer_tokens())
            .expect("answers differ");
        let enc = m.model.encode(&s.image, &s.question).unwrap();
        let own = m.model.answer_loss(&enc.fused, s.answer_tokens(), &[s.answer_tokens().to_vec()]).unwrap();
        let other = m.model.answer_loss(&enc.fused, s.answer_tokens(), &[wrong.answer_tokens().to_vec()]).unwrap();
        increased += usize::from(other > own);
    }
    ensure(increased >= 7, format!("wrong context raised the loss on {increased}/{n} samples"))
}

// ---------------------------------------------------------------- 7

fn c7_ablation() -> Outcome {
    let spec = SynthSpec {
        mode: SynthMode::Open,
        findings: 4,
        ..SynthSpec::default()
    };
    let mut ordered = 0;
    let mut rows = Vec::new();
    for seed in 1..=3u64 {
        let mut b1 = Vec::new();
        for (weight, k) in [(0.0, 0), (1.0, 0), (1.0, 1)] {
            let config = Config {
                seed,
                epochs: 100,
                lr: 5e-4,
                contrastive_weight: weight,
                k,
                ..Config::default()
            };
            let (model, corpus) = train_open_model(&spec, seed, config);
            b1.push(evaluate(&model, &corpus.eval).unwrap().bleu.unwrap().b1);
        }
        let ok = b1[2] >= b1[1] && b1[1] >= b1[0];
        ordered += usize::from(ok);
        rows.push(format!("seed {seed}: Vis {:.4} Vis+CE {:.4} Vis+CE+PC {:.4}", b1[0], b1[1], b1[2]));
    }
    ensure(ordered >= 2, format!("ordering held on {ordered}/3 seeds ({})", rows.join("; ")))
}

// ---------------------------------------------------------------- 8

fn c8_generation_constraints() -> Outcome {
    let cons = GenerationConstraints {
        max_tokens: 40,
        ..GenerationConstraints::default()
    };
    let mut violations = Vec::new();
    let mut beam_mismatch = 0;
    let mut lengths = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DecoderConfig {
            layers: 2,
            heads: 2,
            width: 16,
            max_len: 64,
            vocab_size: 12 + (seed % 9) as usize,
            d_x: 8,
        };
        let mut ps = ParamSet::new();
        let dec = Decoder::new(cfg, &mut ps, &mut rng).unwrap();
        let image = randn(&[4, 8], &mut rng);
        let ctx = vec![vec![BOS, 5, 6, 7, EOS]];
        let step = dec.stepper(&ps, Some(&image), &ctx);
        let g = greedy_decode(&step, &cons).unwrap();
        lengths += g.len();
        let eos_at = g.iter().position(|&t| t == EOS);
        if !has_no_repeated_ngram(&g, 2) {
            violations.push(format!("seed {seed}: repeated bigram"));
        }
        if eos_at.is_some_and(|p| p < cons.min_len) {
            violations.push(format!("seed {seed}: EOS at {}", eos_at.unwrap()));
        }
        if g.len() > cons.max_tokens {
            violations.push(format!("seed {seed}: {} tokens", g.len()));
        }
        let b = beam_decode(&step, &GenerationConstraints { beam: 1, ..cons }).unwrap();
        beam_mismatch += usize::from(b != g);
    }
    ensure(
        violations.is_empty() && beam_mismatch == 0,
        format!(
            "100 decodes, mean length {:.1}; violations {violations:?}; beam-1 mismatches {beam_mismatch}",
            lengths as f64 / 100.0
        ),
    )
}

// ---------------------------------------------------------------- 9

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn c9_bleu_oracle() -> Outcome {
    let eps = SMOOTHING_EPSILON;
    let short = (1.0f64 - 4.0 / 3.0).exp();
    let clip_bp = (1.0f64 - 5.0 / 3.0).exp();
    let e1 = (-1.0f64).exp();
    let p9 = [4.0 / 6.0, 3.0 / 5.0, 2.0 / 4.0, 1.0 / 3.0];
    let table: Vec<(&str, Vec<&str>, [f64; 4])> = vec![
        ("a b c d e", vec!["a b c d e"], [1.0; 4]),
        ("the cat sat", vec!["the cat sat down"], [short, short, short, short * eps.powf(0.25)]),
        ("x y z", vec!["a b c"], [0.0; 4]),
        (
            "the the the the",
            vec!["the cat"],
            [
                0.25,
                (0.25 * eps / 3.0).sqrt(),
                (0.25 * eps / 3.0 * eps / 2.0).cbrt(),
                (0.25 * eps / 3.0 * eps / 2.0 * eps).powf(0.25),
            ],
        ),
        (
            "a b c d",
            vec!["a b d c"],
            [1.0, (1.0f64 / 3.0).sqrt(), (eps / 6.0).cbrt(), (eps * eps / 6.0).powf(0.25)],
        ),
        ("a b c", vec!["a b", "a b c d e"], [1.0, 1.0, 1.0, eps.powf(0.25)]),
        ("p q r s", vec!["p q r", "p q r s t"], [1.0; 4]),
        (
            "a a b",
            vec!["a b b a c"],
            [clip_bp, clip_bp * 0.5f64.sqrt(), clip_bp * (0.5 * eps).cbrt(), clip_bp * (0.5 * eps * eps).powf(0.25)],
        ),
        (
            "x y a b c d",
            vec!["a b c d"],
            [
                p9[0],
                (p9[0] * p9[1]).sqrt(),
                (p9[0] * p9[1] * p9[2]).cbrt(),
                (p9[0] * p9[1] * p9[2] * p9[3]).powf(0.25),
            ],
        ),
        ("b", vec!["a b"], [e1, e1 * eps.sqrt(), e1 * eps.powf(2.0 / 3.0), e1 * eps.powf(0.75)]),
    ];
    let mut worst = 0.0f64;
    for (hyp, refs, expect) in &table {
        let h = words(hyp);
        let r: Vec<Vec<&str>> = refs.iter().map(|s| words(s)).collect();
        let rr: Vec<&[&str]> = r.iter().map(|v| v.as_slice()).collect();
        for n in 1..=4 {
            let got = bleu_n(&h, &rr, n, BleuMode::Cumulative).unwrap();
            worst = worst.max((got - expect[n - 1]).abs());
        }
    }
    let brevity = bleu_n(&words("the cat sat"), &[&words("the cat sat down")[..]], 1, BleuMode::Cumulative).unwrap();
    let mut identity = true;
    for s in ["the heart is normal", "lungs are clear bilaterally", "no acute cardiopulmonary abnormality is seen today"] {
        let w = words(s);
        identity &= (1..=4).all(|n| bleu_n(&w, &[&w[..]], n, BleuMode::Cumulative).unwrap() == 1.0);
    }
    ensure(
        worst < 1e-9 && (brevity - 0.7165).abs() < 5e-5 && identity,
        format!("10 cases, worst |error| {worst:.1e}; brevity case {brevity:.4}; identity pairs 1.0 {identity}"),
    )
}

// ---------------------------------------------------------------- 10

fn record(id: String, kind: AnswerType, answer: &str) -> Record {
    Record {
        id,
        image: vec![vec![0, 60, 120, 180]; 4],
        question: "which region is abnormal?".into(),
        answer_type: kind,
        answer_class: (kind == AnswerType::Close).then(|| answer.to_owned()),
        answer_text: (kind == AnswerType::Open).then(|| answer.to_owned()),
    }
}

fn close_dataset(split: Split, classes: &[(&str, usize)]) -> Dataset {
    let mut recs = Vec::new();
    for (class, n) in classes {
        for i in 0..*n {
            recs.push(record(format!("{class}-{i}"), AnswerType::Close, class));
        }
    }
    let vocab = Vocab::build(recs.iter().flat_map(Record::texts), 1).unwrap();
    Dataset::from_records(split, &recs, &vocab).unwrap()
}

fn c10_vqa_pipeline() -> Outcome {
    // overfit eight close-ended samples
    let spec = SynthSpec {
        samples: 10,
        mode: SynthMode::Close,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic(&spec, 3).unwrap();
    let f = filter_min_occurrence(&corpus.train, &corpus.eval, 0).unwrap();
    let config = Config {
        seed: 5,
        epochs: 60,
        lr: 3e-3,
        augment: false,
        ..Config::default()
    };
    let mut model = RepsNet::new(config, corpus.vocab.clone(), Some(f.answers.clone())).unwrap();
    model.fit(&f.train, |_| {}).unwrap();
    let preds: Vec<Option<usize>> = f
        .train
        .iter()
        .map(|s| Some(model.infer_close(&s.image, &s.question).unwrap()))
        .collect();
    let overfit = accuracy_eval(&preds, &f.train, &f.answers).unwrap();

    // two seen samples (one right) and three unseen
    let answers = AnswerVocab::new(vec![("no".into(), 5), ("yes".into(), 5)], 5).unwrap();
    let eval = close_dataset(Split::Eval, &[("yes", 1), ("no", 1), ("left", 1), ("right", 1), ("both", 1)]);
    let yes = answers.id("yes").unwrap();
    let crafted = accuracy_eval(&[Some(yes), Some(yes), Some(0), Some(1), Some(0)], &eval, &answers).unwrap();

    // minimum-occurrence filtering over {0, 5, 10}
    let train = close_dataset(Split::Train, &[("a", 12), ("b", 9), ("c", 6), ("d", 5), ("e", 2)]);
    let eval = close_dataset(Split::Eval, &[("a", 1), ("b", 1), ("c", 1), ("d", 1), ("e", 1), ("f", 1)]);
    let runs: Vec<_> = [0, 5, 10]
        .iter()
        .map(|&m| filter_min_occurrence(&train, &eval, m).unwrap())
        .collect();
    let classes: Vec<usize> = runs.iter().map(|r| r.answers.len()).collect();
    let unseen: Vec<usize> = runs.iter().map(|r| r.unseen_eval).collect();
    let nested = runs
        .windows(2)
        .all(|w| w[1].answers.classes().iter().all(|c| w[0].answers.id(c).is_some()));
    let monotone = classes.windows(2).all(|w| w[0] >= w[1]) && unseen.windows(2).all(|w| w[0] <= w[1]) && nested;

    ensure(
        overfit.accuracy == 1.0 && crafted.accuracy == 0.5 && crafted.unseen == 3 && monotone,
        format!(
            "overfit {}/{}; crafted accuracy {} with {} unseen; classes {classes:?} unseen {unseen:?} for M_o 0/5/10",
            overfit.correct, overfit.eligible, crafted.accuracy, crafted.unseen
        ),
    )
}

// ---------------------------------------------------------------- 11

fn run_cli(args: &[&str], cwd: &Path) -> std::result::Result<(Vec<u8>, Vec<u8>), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_repsnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok((out.stdout, out.stderr))
}

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    run_cli(&["synth", "--out", "data", "--seed", "11"], d)?;
    fs::write(d.join("run.cfg"), "epochs = 3\nlr = 1e-3\nseed = 11\n").map_err(|e| e.to_string())?;
    for ck in ["a", "b"] {
        run_cli(&["train", "--config", "run.cfg", "--data", "data/train.jsonl", "--checkpoint", ck], d)?;
    }
    let mut differing = Vec::new();
    for f in ["model.ckpt", "index.rnix", "vocab.txt", "classes.txt", "metrics.log"] {
        let read = |ck: &str| fs::read(d.join(ck).join(f)).unwrap_or_default();
        if read("a") != read("b") || read("a").is_empty() {
            differing.push(f);
        }
    }
    let twice = |args: &[&str]| -> std::result::Result<bool, String> { Ok(run_cli(args, d)?.0 == run_cli(args, d)?.0) };
    let eval_args = ["eval", "--checkpoint", "a", "--data", "data/eval.jsonl", "--out", "m1.json"];
    let eval_same = twice(&eval_args)?;
    let json_first = fs::read(d.join("m1.json")).map_err(|e| e.to_string())?;
    run_cli(&["eval", "--checkpoint", "b", "--data", "data/eval.jsonl", "--out", "m2.json"], d)?;
    let json_same = fs::read(d.join("m2.json")).map_err(|e| e.to_string())? == json_first;
    let gen_same = twice(&["generate", "--checkpoint", "a", "--data", "data/eval.jsonl"])?
        && twice(&["generate", "--checkpoint", "a", "--data", "data/eval.jsonl", "--beam", "4"])?;
    let ret_same = twice(&["retrieve", "--checkpoint", "a", "--data", "data/eval.jsonl", "--k", "3"])?;
    ensure(
        differing.is_empty() && eval_same && json_same && gen_same && ret_same,
        format!(
            "checkpoint files differing {differing:?}; eval {eval_same}, json {json_same}, generate {gen_same}, retrieve {ret_same}"
        ),
    )
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} [{n:>2}] {name}: {detail} ({secs:.1}s)");
        results.push((n, name, outcome, secs));
    };

    run(1, "gradient fidelity", &mut c1_gradients);
    run(2, "contrastive loss oracle", &mut c2_contrastive_oracle);
    run(3, "contrastive training efficacy", &mut c3_contrastive_training);
    run(4, "retrieval exactness", &mut c4_retrieval_exactness);
    if wanted(5) || wanted(6) {
        let m = memorize();
        run(5, "decoder memorization", &mut || c5_memorization(&m));
        run(6, "conditioning effectiveness", &mut || c6_conditioning(&m));
    }
    run(7, "ablation ordering", &mut c7_ablation);
    run(8, "generation constraints", &mut c8_generation_constraints);
    run(9, "BLEU oracle", &mut c9_bleu_oracle);
    run(10, "VQA pipeline", &mut c10_vqa_pipeline);
    run(11, "determinism", &mut c11_determinism);

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
