//! Tiny decoder-only language model over a closed word vocabulary.
//!
//! The model consumes already-embedded prompt rows followed by `<bos>` and
//! the answer tokens. Row `t` of the answer logits predicts answer token
//! `t`; answers end with `<eos>`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{
    add_block, add_layer_norm, add_linear, block, causal_mask, layer_norm, linear, LinearFn,
};
use crate::params::{init, ParamGroup, ParamStore, Session};
use crate::text::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub mlp_hidden: usize,
    /// Filled in from the vocabulary when the model is built.
    pub vocab_size: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            context: 256,
            mlp_hidden: 128,
            vocab_size: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "lm dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.vocab_size < 6 {
            return Err(Error::Config("lm vocabulary too small".into()));
        }
        Ok(())
    }
}

/// Names of the linear layers inside LM block `l`, in wrap order.
pub fn block_linears(l: usize) -> Vec<String> {
    ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"]
        .iter()
        .map(|site| format!("lm.block{l}.{site}"))
        .collect()
}

pub fn add_lm_params(store: &mut ParamStore, cfg: &LmConfig, rng: &mut impl Rng) -> Result<()> {
    let g = ParamGroup::LmBase;
    store.insert(
        "lm.tok_emb",
        g,
        init::normal(rng, cfg.vocab_size, cfg.dim, 0.1),
    )?;
    store.insert(
        "lm.pos_emb",
        g,
        init::normal(rng, cfg.context, cfg.dim, 0.02),
    )?;
    for l in 0..cfg.layers {
        add_block(
            store,
            &format!("lm.block{l}"),
            cfg.dim,
            cfg.mlp_hidden,
            g,
            rng,
        )?;
    }
    add_layer_norm(store, "lm.ln_f", cfg.dim, g)?;
    add_linear(store, "lm.head", cfg.dim, cfg.vocab_size, g, rng)
}

/// Token embedding rows for `ids`.
pub fn embed_tokens<'t>(s: &Session<'t>, cfg: &LmConfig, ids: &[u32]) -> Result<Var<'t>> {
    let table = s.param("lm.tok_emb")?;
    let mut index = Vec::with_capacity(ids.len() * cfg.dim);
    for &id in ids {
        if id as usize >= cfg.vocab_size {
            return Err(Error::InvalidIndex {
                index: id as usize,
                len: cfg.vocab_size,
            });
        }
        index.extend((0..cfg.dim).map(|c| id as usize * cfg.dim + c));
    }
    Ok(table.gather(ids.len(), cfg.dim, index.into()))
}

/// Position ids that skip padding: the `k`-th non-pad row gets position `k`.
pub fn position_ids(pad: &[bool]) -> Vec<usize> {
    let mut next = 0;
    pad.iter()
        .map(|&p| {
            if p {
                0
            } else {
                next += 1;
                next - 1
            }
        })
        .collect()
}

/// Final hidden states for an embedded sequence. `pad` flags rows that
/// neither attend nor are attended to.
pub fn forward_hidden<'t>(
    s: &Session<'t>,
    cfg: &LmConfig,
    x: Var<'t>,
    pad: &[bool],
    lin: LinearFn<'_, 't>,
) -> Result<Var<'t>> {
    let (len, dim) = x.shape();
    if dim != cfg.dim {
        return Err(Error::shape(
            format!("rows of width {}", cfg.dim),
            format!("{:?}", x.shape()),
        ));
    }
    if pad.len() != len {
        return Err(Error::shape(format!("{len} pad flags"), pad.len()));
    }
    if len > cfg.context {
        return Err(Error::SequenceTooLong {
            len,
            context: cfg.context,
        });
    }
    let pos = position_ids(pad);
    let index: Vec<usize> = pos
        .iter()
        .flat_map(|&p| (0..dim).map(move |c| p * dim + c))
        .collect();
    let mut h = x + s.param("lm.pos_emb")?.gather(len, dim, index.into());
    let mask = causal_mask(len, Some(pad));
    for l in 0..cfg.layers {
        h = block(s, &format!("lm.block{l}"), h, cfg.heads, Some(&mask), lin)?;
    }
    layer_norm(s, "lm.ln_f", h)
}

/// Teacher-forced logits over the answer: `answer.len() × vocab`.
pub fn forward_logits<'t>(
    s: &Session<'t>,
    cfg: &LmConfig,
    vocab: &Vocabulary,
    prefix: Var<'t>,
    prefix_pad: &[bool],
    answer: &[u32],
    lin: LinearFn<'_, 't>,
) -> Result<Var<'t>> {
    let p = prefix.rows();
    if answer.is_empty() {
        return Err(Error::InvalidArgument("empty answer".into()));
    }
    let len = p + answer.len();
    if len > cfg.context {
        return Err(Error::SequenceTooLong {
            len,
            context: cfg.context,
        });
    }
    let mut ids = vec![vocab.bos_id()];
    ids.extend_from_slice(&answer[..answer.len() - 1]);
    let x = s.tape().concat_rows(&[prefix, embed_tokens(s, cfg, &ids)?]);
    let mut pad = prefix_pad.to_vec();
    pad.resize(len, false);
    let h = forward_hidden(s, cfg, x, &pad, lin)?;
    lin("lm.head", h.slice_rows(p, len))
}

/// `(logit_real, logit_fake)` at answer position `index`.
pub fn authenticity_logits<'t>(
    logits: Var<'t>,
    index: usize,
    vocab: &Vocabulary,
) -> Result<(Var<'t>, Var<'t>)> {
    if index >= logits.rows() {
        return Err(Error::InvalidIndex {
            index,
            len: logits.rows(),
        });
    }
    Ok((
        logits.at(index, vocab.real_id() as usize),
        logits.at(index, vocab.fake_id() as usize),
    ))
}

/// Greedy decoding until `<eos>` or `max_tokens`. The returned ids exclude
/// `<eos>`.
pub fn generate<'t>(
    s: &Session<'t>,
    cfg: &LmConfig,
    vocab: &Vocabulary,
    prefix: Var<'t>,
    prefix_pad: &[bool],
    max_tokens: usize,
    lin: LinearFn<'_, 't>,
) -> Result<Vec<u32>> {
    let mut out: Vec<u32> = Vec::new();
    let p = prefix.rows();
    while out.len() < max_tokens {
        let len = p + 1 + out.len();
        if len > cfg.context {
            break;
        }
        let mut ids = vec![vocab.bos_id()];
        ids.extend_from_slice(&out);
        let x = s.tape().concat_rows(&[prefix, embed_tokens(s, cfg, &ids)?]);
        let mut pad = prefix_pad.to_vec();
        pad.resize(len, false);
        let h = forward_hidden(s, cfg, x, &pad, lin)?;
        let logits = lin("lm.head", h.slice_rows(len - 1, len))?.value();
        let next = argmax(logits.row(0).iter().copied());
        if next == vocab.eos_id() as usize {
            break;
        }
        out.push(next as u32);
    }
    Ok(out)
}

/// Index of the first maximum.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Plain linear layers, for an LM without adapters.
pub fn plain<'a, 't>(s: &'a Session<'t>) -> impl Fn(&str, Var<'t>) -> Result<Var<'t>> + 'a {
    move |name, x| linear(s, name, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Matrix, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (LmConfig, Vocabulary, ParamStore) {
        let vocab = Vocabulary::build(["It is a real face.", "This is an example of a fake face"]);
        let cfg = LmConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            context: 32,
            mlp_hidden: 16,
            vocab_size: vocab.len(),
        };
        let mut st = ParamStore::new();
        add_lm_params(&mut st, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (cfg, vocab, st)
    }

    fn prefix(tape: &Tape, rows: usize, dim: usize, seed: u64) -> Var<'_> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tape.constant(init::normal(&mut rng, rows, dim, 1.0))
    }

    #[test]
    fn logits_have_answer_shape() {
        let (cfg, vocab, st) = setup();
        let tape = Tape::new();
        let s = Session::new(&tape, &st);
        let lin = plain(&s);
        let ans = vocab.encode("It is a real face.");
        let l = forward_logits(
            &s,
            &cfg,
            &vocab,
            prefix(&tape, 3, 16, 0),
            &[false; 3],
            &ans,
            &lin,
        )
        .unwrap();
        assert_eq!(l.shape(), (ans.len(), vocab.len()));
    }

    #[test]
    fn leading_pad_row_does_not_change_answer_logits() {
        let (cfg, vocab, st) = setup();
        let tape = Tape::new();
        let s = Session::new(&tape, &st);
        let lin = plain(&s);
        let ans = vocab.encode("It is a real face.");
        let p = prefix(&tape, 3, 16, 1);
        let base = forward_logits(&s, &cfg, &vocab, p, &[false; 3], &ans, &lin)
            .unwrap()
            .value();
        let junk = prefix(&tape, 1, 16, 2);
        let padded = tape.concat_rows(&[junk, p]);
        let shifted = forward_logits(
            &s,
            &cfg,
            &vocab,
            padded,
            &[true, false, false, false],
            &ans,
            &lin,
        )
        .unwrap()
        .value();
        let diff = (&*base - &*shifted)
            .mapv(f64::abs)
            .fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn later_tokens_do_not_affect_earlier_logits() {
        let (cfg, vocab, st) = setup();
        let tape = Tape::new();
        let s = Session::new(&tape, &st);
        let lin = plain(&s);
        let p = prefix(&tape, 2, 16, 3);
        let a = vocab.encode("It is a real face.");
        let mut b = a.clone();
        *b.last_mut().unwrap() = vocab.fake_id();
        let la = forward_logits(&s, &cfg, &vocab, p, &[false; 2], &a, &lin)
            .unwrap()
            .value();
        let lb = forward_logits(&s, &cfg, &vocab, p, &[false; 2], &b, &lin)
            .unwrap()
            .value();
        // row t sees answer tokens < t, so the last token only affects nothing
        assert_eq!(la, lb);
        b[1] = vocab.fake_id();
        let lc = forward_logits(&s, &cfg, &vocab, p, &[false; 2], &b, &lin)
            .unwrap()
            .value();
        assert_eq!(la.row(0), lc.row(0));
        assert_eq!(la.row(1), lc.row(1));
        assert_ne!(la.row(2), lc.row(2));
    }

    #[test]
    fn overflow_is_reported() {
        let (cfg, vocab, st) = setup();
        let tape = Tape::new();
        let s = Session::new(&tape, &st);
        let lin = plain(&s);
        let ans = vocab.encode("It is a real face.");
        let err = forward_logits(
            &s,
            &cfg,
            &vocab,
            prefix(&tape, 30, 16, 0),
            &[false; 30],
            &ans,
            &lin,
        );
        assert!(matches!(err, Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let (cfg, vocab, st) = setup();
        let tape = Tape::new();
        let s = Session::new(&tape, &st);
        let lin = plain(&s);
        let p = prefix(&tape, 2, 16, 4);
        assert!(generate(&s, &cfg, &vocab, p, &[false; 2], 0, &lin)
            .unwrap()
            .is_empty());
        let a = generate(&s, &cfg, &vocab, p, &[false; 2], 8, &lin).unwrap();
        let b = generate(&s, &cfg, &vocab, p, &[false; 2], 8, &lin).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 8);
    }

    #[test]
    fn authenticity_logits_extract_the_pair() {
        let vocab = Vocabulary::build(["real fake"]);
        let mut m = Matrix::zeros((2, vocab.len()));
        m[[1, vocab.real_id() as usize]] = 3.0;
        m[[1, vocab.fake_id() as usize]] = -3.0;
        let tape = Tape::new();
        let (r, f) = authenticity_logits(tape.constant(m), 1, &vocab).unwrap();
        assert_eq!((r.item(), f.item()), (3.0, -3.0));
        let tape = Tape::new();
        assert!(matches!(
            authenticity_logits(tape.constant(Matrix::zeros((2, vocab.len()))), 2, &vocab),
            Err(Error::InvalidIndex { .. })
        ));
    }

    #[test]
    fn position_ids_skip_pads() {
        assert_eq!(
            position_ids(&[true, false, true, false, false]),
            vec![0, 0, 0, 1, 2]
        );
    }
}
