//! Mock completions server wrapping a `ToyLm`, with era feature flags and
//! optional logit noise. Serves the line-delimited JSON protocol from
//! [`crate::wire`] over a local TCP socket, plus a moderations route
//! backed by a [`ModerationModel`].

use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::moderation::ModerationModel;
use crate::toylm::{argmax, log_softmax, ToyLm};
use crate::vocab::{TokenId, Vocabulary};
use crate::wire::{
    read_frame, write_frame, ApiEra, CompletionRequest, CompletionResponse, ModerationRequest,
    ModerationResponse, ModerationResult, NoiseConfig, PromptInput, Usage, WireError, WireRequest,
    WireResponse, BIAS_CLAMP,
};

pub struct ServerState {
    pub era: ApiEra,
    pub lm: ToyLm,
    pub vocab: Vocabulary,
    pub moderation: ModerationModel,
    pub noise: NoiseConfig,
    request_counter: AtomicU64,
}

impl ServerState {
    pub fn new(
        era: ApiEra,
        lm: ToyLm,
        vocab: Vocabulary,
        moderation: ModerationModel,
        noise: NoiseConfig,
    ) -> Result<ServerState> {
        if lm.vocab_size() != vocab.size() {
            return Err(Error::InvalidConfig(format!(
                "model vocab size {} does not match vocabulary size {}",
                lm.vocab_size(),
                vocab.size()
            )));
        }
        Ok(ServerState {
            era,
            lm,
            vocab,
            moderation,
            noise,
            request_counter: AtomicU64::new(0),
        })
    }

    fn resolve_prompt(&self, prompt: &PromptInput) -> Result<Vec<TokenId>> {
        match prompt {
            PromptInput::Tokens(seq) => {
                self.vocab.check_seq(seq)?;
                Ok(seq.ids().to_vec())
            }
            PromptInput::Text(text) => Ok(self.vocab.tokenize(text)?.ids().to_vec()),
        }
    }

    /// Base (unbiased) logits for the next token, with this request's
    /// noise applied. One noise draw per vocabulary slot, consumed in
    /// token-id order so responses are reproducible.
    fn noisy_logits(
        &self,
        ctx: &[TokenId],
        rng: &mut Option<(ChaCha8Rng, Normal<f64>)>,
    ) -> Vec<f64> {
        let mut logits = self.lm.next_logits(ctx, None);
        if let Some((rng, normal)) = rng {
            for l in logits.iter_mut() {
                *l += normal.sample(rng);
            }
        }
        logits
    }

    pub fn handle_completions(&self, req: &CompletionRequest) -> Result<CompletionResponse> {
        req.validate()?;
        let prompt = self.resolve_prompt(&req.prompt)?;

        let ticket = self.request_counter.fetch_add(1, Ordering::SeqCst);
        let mut rng = if self.noise.enabled && self.noise.sigma > 0.0 {
            let seed = mix64(self.noise.seed, mix64(ticket, req.seed));
            let normal = Normal::new(0.0, self.noise.sigma)
                .map_err(|_| Error::InvalidConfig("bad noise sigma".into()))?;
            Some((ChaCha8Rng::seed_from_u64(seed), normal))
        } else {
            None
        };

        let bias: Vec<(TokenId, f64)> = req
            .logit_bias
            .iter()
            .map(|(&t, &b)| (t, b.clamp(-BIAS_CLAMP, BIAS_CLAMP)))
            .collect();
        for &(t, _) in &bias {
            if t >= self.vocab.size() {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab_size: self.vocab.size(),
                });
            }
        }

        let prompt_logprobs = if req.echo && self.era == ApiEra::PromptLogprobs {
            let mut lps = Vec::with_capacity(prompt.len());
            for i in 0..prompt.len() {
                let logits = self.noisy_logits(&prompt[..i], &mut rng);
                lps.push(log_softmax(&logits)[prompt[i] as usize]);
            }
            Some(lps)
        } else {
            None
        };

        let mut ctx = prompt.clone();
        let mut tokens = Vec::with_capacity(req.max_tokens as usize);
        let mut top_logprobs = Vec::with_capacity(req.max_tokens as usize);
        for _ in 0..req.max_tokens {
            let base = self.noisy_logits(&ctx, &mut rng);
            let mut biased = base.clone();
            for &(t, b) in &bias {
                biased[t as usize] += b;
            }
            let next = argmax(&biased);

            if req.logprobs > 0 {
                // The reported top-k follows the era contract: biased
                // distributions before March 2024, unbiased after.
                let reported = match self.era {
                    ApiEra::UnbiasedTopK => log_softmax(&base),
                    ApiEra::BiasedTopK | ApiEra::PromptLogprobs => log_softmax(&biased),
                };
                let mut entries: Vec<(TokenId, f64)> = reported
                    .iter()
                    .enumerate()
                    .map(|(t, &lp)| (t as TokenId, lp))
                    .collect();
                entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
                entries.truncate(req.logprobs as usize);
                top_logprobs.push(entries);
            } else {
                top_logprobs.push(Vec::new());
            }

            tokens.push(next);
            ctx.push(next);
        }

        Ok(CompletionResponse {
            text: self.vocab.detokenize(&tokens.clone().into())?,
            tokens,
            top_logprobs,
            prompt_logprobs,
            usage: Usage {
                prompt_tokens: prompt.len() as u64,
                completion_tokens: req.max_tokens as u64,
            },
        })
    }

    pub fn handle_moderations(&self, req: &ModerationRequest) -> Result<ModerationResponse> {
        let scored = self.moderation.moderate(&self.vocab, &req.input)?;
        let results = scored
            .into_iter()
            .map(|s| {
                let mut category_scores = std::collections::BTreeMap::new();
                let mut categories = std::collections::BTreeMap::new();
                for (cat, (&score, &flag)) in self
                    .moderation
                    .categories
                    .iter()
                    .zip(s.scores.iter().zip(&s.flags))
                {
                    category_scores.insert(cat.name.clone(), score);
                    categories.insert(cat.name.clone(), flag);
                }
                ModerationResult {
                    category_scores,
                    categories,
                    flagged: s.flagged(),
                }
            })
            .collect();
        Ok(ModerationResponse { results })
    }

    pub fn handle(&self, req: &WireRequest) -> WireResponse {
        let result = match req {
            WireRequest::Completions(c) => self.handle_completions(c).map(WireResponse::Completion),
            WireRequest::Moderations(m) => self.handle_moderations(m).map(WireResponse::Moderation),
        };
        result.unwrap_or_else(|e| WireResponse::Error(wire_error(&e)))
    }
}

fn wire_error(err: &Error) -> WireError {
    let code = match err {
        Error::Protocol { code, .. } => code.clone(),
        Error::BatchTooLarge(_) => "batch_too_large".into(),
        Error::Tokenize { .. } => "tokenize_error".into(),
        Error::TokenOutOfRange { .. } => "token_out_of_range".into(),
        _ => "internal_error".into(),
    };
    WireError {
        code,
        message: err.to_string(),
    }
}

fn mix64(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the xor of the inputs.
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A running mock server; shuts down when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Poke the accept loop so it notices the flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds `addr` (use port 0 for an ephemeral port) and serves connections
/// on background threads.
pub fn spawn(addr: &str, state: ServerState) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let state = Arc::new(state);

    let flag = Arc::clone(&shutdown);
    let join = std::thread::spawn(move || {
        for stream in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let state = Arc::clone(&state);
            std::thread::spawn(move || serve_connection(state, stream));
        }
    });

    Ok(ServerHandle {
        addr: local,
        shutdown,
        join: Some(join),
    })
}

fn serve_connection(state: Arc<ServerState>, stream: TcpStream) {
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(stream);
    let mut writer = write_half;
    loop {
        let request: Option<WireRequest> = match read_frame(&mut reader) {
            Ok(r) => r,
            Err(e) => {
                // Malformed line: report and keep the connection.
                let resp = WireResponse::Error(wire_error(&e));
                if write_frame(&mut writer, &resp).is_err() {
                    return;
                }
                if matches!(e, Error::Io(_)) {
                    return;
                }
                continue;
            }
        };
        let Some(request) = request else { return };
        let response = state.handle(&request);
        if write_frame(&mut writer, &response).is_err() {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::ToyLmConfig;
    use crate::vocab::TokenSeq;
    use std::collections::BTreeMap;

    fn tiny_state(era: ApiEra, noise: NoiseConfig) -> ServerState {
        let vocab = Vocabulary::new(
            ["a", "b", "c", "d", "e", "f", "g", "h"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        let lm = ToyLm::from_counts(
            ToyLmConfig {
                n: 8,
                lambda: 1.0,
                alpha: 1.0,
                ..ToyLmConfig::default()
            },
            [],
        )
        .unwrap();
        let moderation = ModerationModel::seeded(1, 8, 3);
        ServerState::new(era, lm, vocab, moderation, noise).unwrap()
    }

    #[test]
    fn echo_returns_prompt_logprobs_only_in_prompt_era() {
        let state = tiny_state(ApiEra::PromptLogprobs, NoiseConfig::off());
        let mut req = CompletionRequest::from_tokens(TokenSeq::new(vec![0, 1, 2, 3]), 0);
        req.echo = true;
        let resp = state.handle_completions(&req).unwrap();
        assert_eq!(resp.prompt_logprobs.as_ref().unwrap().len(), 4);
        assert!(resp.tokens.is_empty());
        assert_eq!(
            resp.usage,
            Usage {
                prompt_tokens: 4,
                completion_tokens: 0
            }
        );

        let state = tiny_state(ApiEra::BiasedTopK, NoiseConfig::off());
        let resp = state.handle_completions(&req).unwrap();
        assert!(resp.prompt_logprobs.is_none());
    }

    #[test]
    fn uniform_top5_all_log_one_eighth() {
        let state = tiny_state(ApiEra::BiasedTopK, NoiseConfig::off());
        let mut req = CompletionRequest::from_tokens(TokenSeq::new(vec![0]), 1);
        req.logprobs = 5;
        let resp = state.handle_completions(&req).unwrap();
        assert_eq!(resp.top_logprobs[0].len(), 5);
        for &(_, lp) in &resp.top_logprobs[0] {
            assert!((lp - (1.0f64 / 8.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn unbiased_era_hides_boosted_token_from_topk() {
        // Counts rank token 7 either 6th or lower unbiased; a +50 bias makes
        // it the sampled token while the reported top-5 stays unbiased.
        let vocab = Vocabulary::new(
            ["a", "b", "c", "d", "e", "f", "g", "h"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        let weights = vec![80.0, 70.0, 60.0, 50.0, 40.0, 30.0, 20.0, 10.0];
        let lm = ToyLm::from_counts(
            ToyLmConfig {
                n: 8,
                lambda: 1.0,
                alpha: 1.0,
                ..ToyLmConfig::default()
            },
            [(vec![0u32], weights)],
        )
        .unwrap();
        let state = ServerState::new(
            ApiEra::UnbiasedTopK,
            lm,
            vocab,
            ModerationModel::seeded(1, 8, 3),
            NoiseConfig::off(),
        )
        .unwrap();

        let mut req = CompletionRequest::from_tokens(TokenSeq::new(vec![0]), 1);
        req.logprobs = 5;
        req.logit_bias = BTreeMap::from([(7u32, 50.0)]);
        let resp = state.handle_completions(&req).unwrap();
        assert_eq!(resp.tokens, vec![7]);
        assert!(resp.top_logprobs[0].iter().all(|&(t, _)| t != 7));
        // Direct logit computation: unbiased top-5 is tokens 0..5.
        let ids: Vec<TokenId> = resp.top_logprobs[0].iter().map(|&(t, _)| t).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);

        // In the biased era, the same request reports the boosted value.
        let state = ServerState::new(
            ApiEra::BiasedTopK,
            state.lm.clone(),
            state.vocab.clone(),
            ModerationModel::seeded(1, 8, 3),
            NoiseConfig::off(),
        )
        .unwrap();
        let resp = state.handle_completions(&req).unwrap();
        assert_eq!(resp.top_logprobs[0][0].0, 7);
    }

    #[test]
    fn noise_off_is_deterministic() {
        let state = tiny_state(ApiEra::BiasedTopK, NoiseConfig::off());
        let mut req = CompletionRequest::from_tokens(TokenSeq::new(vec![0, 1]), 3);
        req.logprobs = 5;
        let a = state.handle_completions(&req).unwrap();
        let b = state.handle_completions(&req).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn noise_on_perturbs_logprobs() {
        let state = tiny_state(ApiEra::BiasedTopK, NoiseConfig::with_sigma(0.05, 3));
        let mut req = CompletionRequest::from_tokens(TokenSeq::new(vec![0, 1]), 1);
        req.logprobs = 1;
        let a = state.handle_completions(&req).unwrap();
        let b = state.handle_completions(&req).unwrap();
        assert_ne!(a.top_logprobs[0][0].1, b.top_logprobs[0][0].1);
    }

    #[test]
    fn moderation_route_batches_and_rejects_oversize() {
        let state = tiny_state(ApiEra::BiasedTopK, NoiseConfig::off());
        let req = ModerationRequest {
            input: vec!["ab".into(), "cd".into()],
        };
        let resp = state.handle_moderations(&req).unwrap();
        assert_eq!(resp.results.len(), 2);
        assert_eq!(resp.results[0].category_scores.len(), 3);

        let req = ModerationRequest {
            input: vec!["a".into(); 33],
        };
        match state.handle(&WireRequest::Moderations(req)) {
            WireResponse::Error(e) => assert_eq!(e.code, "batch_too_large"),
            other => panic!("expected error, got {other:?}"),
        }
    }
}
