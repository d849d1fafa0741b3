//! Seeded synthetic target generator: samples token sequences from a toy
//! model's conditional distributions and keeps only those whose text
//! re-tokenizes to the requested length, so dataset lines load back with
//! exact token counts.

use anyhow::{bail, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gcq_core::toylm::{log_softmax, ToyLm};
use gcq_core::vocab::{TokenId, TokenSeq, Vocabulary};

pub fn generate_targets(
    vocab: &Vocabulary,
    lm: &ToyLm,
    count: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<String>> {
    if min_len < 1 || max_len < min_len {
        bail!("need 1 <= min_len <= max_len");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = rng.random_range(min_len..=max_len);
        let mut accepted = None;
        for _ in 0..300 {
            let seq = sample_sequence(lm, len, &mut rng);
            let canonical = vocab.canonicalize(&seq)?;
            if canonical.len() == len {
                accepted = Some(vocab.detokenize(&canonical)?);
                break;
            }
        }
        match accepted {
            Some(text) => out.push(text),
            None => bail!("could not generate a length-{len} target (index {i})"),
        }
    }
    Ok(out)
}

fn sample_sequence(lm: &ToyLm, len: usize, rng: &mut ChaCha8Rng) -> TokenSeq {
    let mut ctx: Vec<TokenId> = Vec::with_capacity(len);
    for _ in 0..len {
        let probs: Vec<f64> = log_softmax(&lm.next_logits(&ctx, None))
            .into_iter()
            .map(f64::exp)
            .collect();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut tok = probs.len() - 1;
        for (t, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                tok = t;
                break;
            }
        }
        ctx.push(tok as TokenId);
    }
    TokenSeq::new(ctx)
}
