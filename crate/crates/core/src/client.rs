//! Wire-protocol client with retry, cost accounting and hard budget
//! enforcement. Every call is charged to the client's [`CostLedger`]; a
//! request that would exceed the budget fails before anything is sent.

use std::io::BufReader;
use std::net::TcpStream;
use std::sync::Arc;

use crate::cost::CostLedger;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;
use crate::wire::{
    read_frame, write_frame, CompletionRequest, CompletionResponse, ModerationRequest,
    ModerationResult, PromptInput, WireRequest, WireResponse,
};

pub struct ApiClient {
    addr: String,
    max_retries: u32,
    reader: Option<BufReader<TcpStream>>,
    writer: Option<TcpStream>,
    vocab: Arc<Vocabulary>,
    pub ledger: CostLedger,
}

impl ApiClient {
    /// Lazily-connecting client; the first request opens the connection.
    pub fn new(addr: impl Into<String>, vocab: Arc<Vocabulary>, ledger: CostLedger) -> ApiClient {
        ApiClient {
            addr: addr.into(),
            max_retries: 2,
            reader: None,
            writer: None,
            vocab,
            ledger,
        }
    }

    pub fn with_max_retries(mut self, retries: u32) -> ApiClient {
        self.max_retries = retries;
        self
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    fn connect(&mut self) -> Result<()> {
        let stream = TcpStream::connect(&self.addr)?;
        stream.set_nodelay(true)?;
        self.reader = Some(BufReader::new(stream.try_clone()?));
        self.writer = Some(stream);
        Ok(())
    }

    fn disconnect(&mut self) {
        self.reader = None;
        self.writer = None;
    }

    fn roundtrip(&mut self, request: &WireRequest) -> Result<WireResponse> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let io_result: Result<WireResponse> = (|| {
                if self.writer.is_none() {
                    self.connect()?;
                }
                write_frame(self.writer.as_mut().unwrap(), request)?;
                match read_frame(self.reader.as_mut().unwrap())? {
                    Some(resp) => Ok(resp),
                    None => Err(Error::Io(std::io::Error::new(
                        std::io::ErrorKind::UnexpectedEof,
                        "server closed the connection",
                    ))),
                }
            })();
            match io_result {
                Ok(resp) => return Ok(resp),
                Err(Error::Io(e)) => {
                    self.disconnect();
                    if attempts > self.max_retries {
                        return Err(Error::Transport {
                            attempts,
                            source: e,
                        });
                    }
                }
                Err(other) => return Err(other),
            }
        }
    }

    /// Exact token footprint of a request: resolved prompt length plus
    /// `max_tokens` completions.
    pub fn estimate_usage(&self, req: &CompletionRequest) -> Result<(u64, u64)> {
        let prompt_tokens = match &req.prompt {
            PromptInput::Tokens(seq) => seq.len() as u64,
            PromptInput::Text(text) => self.vocab.tokenize(text)?.len() as u64,
        };
        Ok((prompt_tokens, req.max_tokens as u64))
    }

    /// Sends a completion request, booking the response usage as-is.
    pub fn send(&mut self, req: &CompletionRequest) -> Result<CompletionResponse> {
        let (p, c) = self.estimate_usage(req)?;
        self.send_billed(req, p, c)
    }

    /// Sends a completion request but books the given prompt/completion
    /// split instead of the raw usage. Scoring requests bill the target
    /// prefix they carry at the completion rate; the total token count
    /// must match the wire usage.
    pub fn send_billed(
        &mut self,
        req: &CompletionRequest,
        bill_prompt: u64,
        bill_completion: u64,
    ) -> Result<CompletionResponse> {
        self.ledger
            .ensure_affordable(bill_prompt, bill_completion)?;
        match self.roundtrip(&WireRequest::Completions(req.clone()))? {
            WireResponse::Completion(resp) => {
                debug_assert_eq!(
                    bill_prompt + bill_completion,
                    resp.usage.prompt_tokens + resp.usage.completion_tokens,
                    "billing split must conserve the total token count"
                );
                self.ledger.charge(bill_prompt, bill_completion)?;
                Ok(resp)
            }
            WireResponse::Error(e) => Err(Error::Protocol {
                code: e.code,
                message: e.message,
            }),
            WireResponse::Moderation(_) => Err(Error::Protocol {
                code: "unexpected_response".into(),
                message: "moderation response to a completion request".into(),
            }),
        }
    }

    /// Scores a batch of at most 32 texts; counts one request, no tokens.
    pub fn moderate(&mut self, texts: &[String]) -> Result<Vec<ModerationResult>> {
        if texts.len() > crate::moderation::MAX_MODERATION_BATCH {
            return Err(Error::BatchTooLarge(texts.len()));
        }
        let request = WireRequest::Moderations(ModerationRequest {
            input: texts.to_vec(),
        });
        match self.roundtrip(&request)? {
            WireResponse::Moderation(resp) => {
                self.ledger.charge_request_only();
                Ok(resp.results)
            }
            WireResponse::Error(e) => Err(Error::Protocol {
                code: e.code,
                message: e.message,
            }),
            WireResponse::Completion(_) => Err(Error::Protocol {
                code: "unexpected_response".into(),
                message: "completion response to a moderation request".into(),
            }),
        }
    }
}
