//! Tiny-model gradient checks and per-token chain-rule gaps, shared by the
//! model tests and the acceptance suite.

use gasr_core::asr::{AsrConfig, AsrModel};
use gasr_core::ctc::ctc_loss_node;
use gasr_core::guided::{guided_prompt, llm_features, GuidedConfig, GuidedModel, PromptVariant};
use gasr_core::llm::{build_prompt, LlmConfig, ToyLlm, GEC_INSTRUCTION};
use gasr_core::nn::BlockConfig;
use gasr_core::Vocabulary;
use gasr_tensor::{finite_difference_check, init, Graph, Mode, ParamId, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn block(dim: usize) -> BlockConfig {
    BlockConfig {
        dim,
        heads: 2,
        ff_dim: 2 * dim,
        keep: 0.9,
        layers: 1,
    }
}

pub fn asr_config() -> AsrConfig {
    AsrConfig {
        feat_dim: 4,
        encoder: block(8),
        decoder: block(8),
        lambda: 0.3,
    }
}

pub fn llm_config() -> LlmConfig {
    LlmConfig {
        block: block(12),
        context: 512,
    }
}

pub fn guided_config(use_llm: bool) -> GuidedConfig {
    GuidedConfig {
        decoder: block(8),
        prompt: PromptVariant::Gec,
        use_llm,
    }
}

pub fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn last_row(t: &Tensor<f64>) -> Vec<f64> {
    t.row_slice(t.rows() - 1).to_vec()
}

/// CTC loss through frontend, encoder and CTC head.
pub fn frontend_encoder_gradient() -> f64 {
    let vocab = Vocabulary::default();
    let mut store = ParamStore::<f64>::new();
    let model = AsrModel::new(&asr_config(), &vocab, &mut store, 1).unwrap();
    let feats = random(&mut ChaCha8Rng::seed_from_u64(2), &[16, 4]);
    let tokens = vocab.encode("ab a").unwrap();
    finite_difference_check(
        &mut store,
        |g, s| {
            let x = g.constant(feats.clone());
            let h = model.encode(g, s, x).unwrap();
            let lp = model.ctc_log_probs(g, s, h).unwrap();
            Ok(ctc_loss_node(g, lp, &tokens).unwrap())
        },
        1e-5,
        3,
        0,
    )
    .unwrap()
    .max_rel_error
}

/// The interpolated CTC/attention objective, all Step-1 parameters.
pub fn joint_asr_gradient() -> f64 {
    let vocab = Vocabulary::default();
    let mut store = ParamStore::<f64>::new();
    let model = AsrModel::new(&asr_config(), &vocab, &mut store, 1).unwrap();
    let feats = random(&mut ChaCha8Rng::seed_from_u64(2), &[16, 4]);
    let tokens = vocab.encode("ab a").unwrap();
    finite_difference_check(
        &mut store,
        |g, s| {
            let x = g.constant(feats.clone());
            Ok(model.losses(g, s, x, &tokens, 0.3).unwrap().joint)
        },
        1e-5,
        3,
        0,
    )
    .unwrap()
    .max_rel_error
}

/// Response cross-entropy of the toy LM under a prompt.
pub fn toy_llm_gradient() -> f64 {
    let vocab = Vocabulary::default();
    let mut store = ParamStore::<f64>::new();
    let llm = ToyLlm::new(&llm_config(), &vocab, &mut store, 3).unwrap();
    let mut tokens = build_prompt(&vocab, "fix", "ab").unwrap().tokens(&vocab);
    let start = tokens.len() - 1;
    tokens.extend(vocab.encode("ab").unwrap());
    let targets: Vec<usize> = tokens[start + 1..].iter().map(|&t| vocab.dec_class(t)).chain([vocab.dec_class(vocab.eos())]).collect();
    finite_difference_check(
        &mut store,
        |g, s| {
            let (h, _) = llm.hidden(g, s, &tokens, 0, None).unwrap();
            let h = g.slice(h, 0, start, targets.len())?;
            let lp = llm.log_probs(g, s, h).unwrap();
            g.cross_entropy(lp, &targets)
        },
        1e-6,
        3,
        1,
    )
    .unwrap()
    .max_rel_error
}

/// Guided decoder loss, with projected LM features or token embeddings.
pub fn guided_gradient(use_llm: bool) -> f64 {
    let vocab = Vocabulary::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tokens = vocab.encode("ba b").unwrap();
    let h = random(&mut rng, &[3, 8]);
    let feats = random(&mut rng, &[tokens.len() + 1, 12]);
    let mut store = ParamStore::<f64>::new();
    let model = GuidedModel::new(&guided_config(use_llm), &vocab, 12, &mut store, 5).unwrap();
    // eps 1e-5 lands one ReLU input on its kink for this seed.
    finite_difference_check(
        &mut store,
        |g, s| {
            let hv = g.constant(h.clone());
            let fv = use_llm.then(|| g.constant(feats.clone()));
            Ok(model.loss_node(g, s, hv, fv, &tokens).unwrap())
        },
        1e-6,
        3,
        2,
    )
    .unwrap()
    .max_rel_error
}

/// |aed_loss + Σ log p(w_n | W_<n, O)| with each term from its own forward pass.
pub fn aed_chain_gap() -> f64 {
    let vocab = Vocabulary::default();
    let mut store = ParamStore::<f64>::new();
    let model = AsrModel::new(&asr_config(), &vocab, &mut store, 6).unwrap();
    let feats = random(&mut ChaCha8Rng::seed_from_u64(7), &[20, 4]);
    let tokens = vocab.encode("abc de").unwrap();
    let mut g = Graph::no_grad(Mode::Eval, 0);
    let x = g.constant(feats.clone());
    let h = model.encode(&mut g, &store, x).unwrap();
    let loss = model.aed_loss_node(&mut g, &store, h, &tokens).unwrap();
    let loss = g.value(loss).item();
    let mut sum = 0.0;
    let mut prefix = vec![vocab.bos()];
    for &t in tokens.iter().chain([&vocab.eos()]) {
        let mut g = Graph::no_grad(Mode::Eval, 0);
        let x = g.constant(feats.clone());
        let h = model.encode(&mut g, &store, x).unwrap();
        let lp = model.decoder_log_probs(&mut g, &store, h, &prefix).unwrap();
        sum += last_row(g.value(lp))[vocab.dec_class(t)];
        prefix.push(t);
    }
    (loss + sum).abs()
}

/// |sequence log-likelihood − Σ next-token log-probs| for the toy LM.
pub fn llm_chain_gap() -> f64 {
    let vocab = Vocabulary::default();
    let mut store = ParamStore::<f64>::new();
    let llm = ToyLlm::new(&llm_config(), &vocab, &mut store, 8).unwrap();
    let prompt = build_prompt(&vocab, GEC_INSTRUCTION, "teh cat").unwrap();
    let words = vocab.encode("the cat").unwrap();
    let total = llm.sequence_loglik(&store, &prompt, &words).unwrap();
    let mut context = prompt.tokens(&vocab);
    let mut sum = 0.0;
    for &t in words.iter().chain([&vocab.eos()]) {
        let mut g = Graph::no_grad(Mode::Eval, 0);
        let (h, _) = llm.hidden(&mut g, &store, &context, 0, None).unwrap();
        let lp = llm.log_probs(&mut g, &store, h).unwrap();
        sum += last_row(g.value(lp))[vocab.dec_class(t)];
        context.push(t);
    }
    (total - sum).abs()
}

/// |guided_loss + Σ log p(w_n | W̃, W_<n, O)|, features recomputed per prefix.
pub fn guided_chain_gap() -> f64 {
    let vocab = Vocabulary::default();
    let mut lstore = ParamStore::<f64>::new();
    let llm = ToyLlm::new(&llm_config(), &vocab, &mut lstore, 9).unwrap();
    let mut gstore = ParamStore::<f64>::new();
    let model = GuidedModel::new(&guided_config(true), &vocab, 12, &mut gstore, 10).unwrap();
    let h = random(&mut ChaCha8Rng::seed_from_u64(11), &[4, 8]);
    let hyp = vocab.encode("hte dgo").unwrap();
    let words = vocab.encode("the dog").unwrap();
    let prompt = guided_prompt(&vocab, PromptVariant::Gec, &hyp).unwrap();
    let feats = llm_features(&llm, &lstore, &prompt, &words).unwrap();
    let mut g = Graph::no_grad(Mode::Eval, 0);
    let hv = g.constant(h.clone());
    let fv = g.constant(feats);
    let loss = model.loss_node(&mut g, &gstore, hv, Some(fv), &words).unwrap();
    let loss = g.value(loss).item();
    let mut sum = 0.0;
    for (n, &t) in words.iter().chain([&vocab.eos()]).enumerate() {
        // Later words cannot leak in: features come from the prefix alone.
        let prefix_feats = llm_features(&llm, &lstore, &prompt, &words[..n]).unwrap();
        let mut inputs = vec![vocab.bos()];
        inputs.extend_from_slice(&words[..n]);
        let mut g = Graph::no_grad(Mode::Eval, 0);
        let hv = g.constant(h.clone());
        let fv = g.constant(prefix_feats);
        let lp = model.log_probs(&mut g, &gstore, hv, Some(fv), &inputs).unwrap();
        sum += last_row(g.value(lp))[vocab.dec_class(t)];
    }
    (loss + sum).abs()
}

fn project(g: &mut Graph<f64>, x: Var) -> Result<Var> {
    let w = init::normal(&mut ChaCha8Rng::seed_from_u64(99), g.shape(x), 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn primitive(shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, shape)| store.add(format!("p{i}"), init::normal(&mut rng, shape, 1.0)).unwrap())
        .collect();
    finite_difference_check(
        &mut store,
        |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let y = f(g, &vars)?;
            if g.value(y).len() == 1 {
                Ok(y)
            } else {
                project(g, y)
            }
        },
        1e-5,
        30,
        5,
    )
    .unwrap()
    .max_rel_error
}

/// Max relative finite-difference error of every differentiable graph op.
pub fn primitive_gradients() -> Vec<(&'static str, f64)> {
    vec![
        ("matmul", primitive(&[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]))),
        ("matmul_bt", primitive(&[&[3, 4], &[5, 4]], |g, v| g.matmul_bt(v[0], v[1]))),
        ("add", primitive(&[&[3, 4], &[4]], |g, v| g.add(v[0], v[1]))),
        ("mul", primitive(&[&[3, 4], &[1, 4]], |g, v| g.mul(v[0], v[1]))),
        ("scale", primitive(&[&[2, 3]], |g, v| g.scale(v[0], -1.7))),
        ("concat", primitive(&[&[2, 3], &[4, 3]], |g, v| g.concat(&[v[0], v[1]], 0))),
        ("slice", primitive(&[&[5, 6]], |g, v| g.slice(v[0], 1, 2, 2))),
        ("embedding", primitive(&[&[5, 3]], |g, v| g.embedding(v[0], &[4, 0, 4, 2]))),
        ("softmax", primitive(&[&[3, 5]], |g, v| g.softmax(v[0]))),
        (
            "masked_softmax",
            primitive(&[&[2, 3]], |g, v| g.masked_softmax(v[0], &[true, false, true, false, true, true])),
        ),
        ("log_softmax", primitive(&[&[3, 5]], |g, v| g.log_softmax(v[0]))),
        ("layer_norm", primitive(&[&[3, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("gelu", primitive(&[&[4, 4]], |g, v| g.gelu(v[0]))),
        (
            "relu",
            // Shifted well away from the kink.
            primitive(&[&[3, 3]], |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let shift = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 2 == 0 { 0.5 } else { -100.0 }));
                let x = g.add(sq, shift)?;
                g.relu(x)
            }),
        ),
        (
            "cross_entropy",
            primitive(&[&[3, 4]], |g, v| {
                let lp = g.log_softmax(v[0])?;
                g.cross_entropy(lp, &[1, 3, 0])
            }),
        ),
        ("sum", primitive(&[&[2, 5]], |g, v| g.sum(v[0]))),
        ("unfold_rows", primitive(&[&[7, 2]], |g, v| g.unfold_rows(v[0], 3, 2, 1, 3))),
        ("reshape", primitive(&[&[2, 6]], |g, v| g.reshape(v[0], vec![3, 4]))),
        ("dropout", primitive(&[&[2, 3]], |g, v| g.dropout(v[0], 0.5))),
        (
            "ctc_loss",
            primitive(&[&[5, 3]], |g, v| {
                let lp = g.log_softmax(v[0])?;
                Ok(ctc_loss_node(g, lp, &[1, 2]).unwrap())
            }),
        ),
    ]
}
