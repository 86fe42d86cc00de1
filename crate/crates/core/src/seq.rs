//! Token sequences with a prompt region followed by fixed-length blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    tokens: Vec<TokenId>,
    prompt_len: usize,
    block_len: usize,
    n_blocks: usize,
    mask_id: TokenId,
}

impl TokenSeq {
    pub fn new(prompt: Vec<TokenId>, block_len: usize, mask_id: TokenId) -> Result<Self> {
        if block_len == 0 {
            return Err(Error::Precondition("block_len must be positive".into()));
        }
        if let Some(i) = prompt.iter().position(|&t| t == mask_id) {
            return Err(Error::MaskInPrompt(i));
        }
        Ok(Self {
            prompt_len: prompt.len(),
            tokens: prompt,
            block_len,
            n_blocks: 0,
            mask_id,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    /// Absolute index range of block `b`.
    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        let start = self.prompt_len + b * self.block_len;
        start..start + self.block_len
    }

    /// Absolute index range spanning blocks `first..=last`.
    pub fn window_range(&self, first: usize, last: usize) -> std::ops::Range<usize> {
        self.prompt_len + first * self.block_len..self.prompt_len + (last + 1) * self.block_len
    }

    /// Appends a finished block. Masks are rejected here; use
    /// [`TokenSeq::push_masked_block`] for a block that is about to be denoised.
    pub fn append_block(&mut self, block: &[TokenId]) -> Result<()> {
        if block.len() != self.block_len {
            return Err(Error::BlockLength {
                expected: self.block_len,
                got: block.len(),
            });
        }
        if let Some(i) = block.iter().position(|&t| t == self.mask_id) {
            return Err(Error::MaskInBlock(i));
        }
        self.tokens.extend_from_slice(block);
        self.n_blocks += 1;
        Ok(())
    }

    pub fn push_masked_block(&mut self) {
        self.tokens
            .extend(std::iter::repeat_n(self.mask_id, self.block_len));
        self.n_blocks += 1;
    }

    pub fn block_slice(&self, b: usize) -> Result<&[TokenId]> {
        if b >= self.n_blocks {
            return Err(Error::BlockOutOfRange {
                index: b,
                n_blocks: self.n_blocks,
            });
        }
        Ok(&self.tokens[self.block_range(b)])
    }

    /// Everything strictly before block `b`, prompt included.
    pub fn context_before(&self, b: usize) -> &[TokenId] {
        &self.tokens[..self.prompt_len + b * self.block_len]
    }

    /// Overwrites blocks `first..first + window.len() / block_len` in place.
    pub fn replace_window(&mut self, first: usize, window: &[TokenId]) -> Result<()> {
        if window.is_empty() || !window.len().is_multiple_of(self.block_len) {
            return Err(Error::BlockLength {
                expected: self.block_len,
                got: window.len(),
            });
        }
        let last = first + window.len() / self.block_len - 1;
        if last >= self.n_blocks {
            return Err(Error::BlockOutOfRange {
                index: last,
                n_blocks: self.n_blocks,
            });
        }
        let range = self.window_range(first, last);
        self.tokens[range].copy_from_slice(window);
        Ok(())
    }

    /// Replaces the whole token buffer after a denoiser call. Length and
    /// prompt-mask invariants are rechecked by the caller.
    pub(crate) fn set_tokens(&mut self, tokens: Vec<TokenId>) {
        debug_assert_eq!(tokens.len(), self.tokens.len());
        self.tokens = tokens;
    }

    pub(crate) fn set_token(&mut self, pos: usize, tok: TokenId) {
        self.tokens[pos] = tok;
    }

    /// Copy holding the prompt and the first `n` blocks.
    pub fn truncated(&self, n: usize) -> TokenSeq {
        let n = n.min(self.n_blocks);
        TokenSeq {
            tokens: self.tokens[..self.prompt_len + n * self.block_len].to_vec(),
            n_blocks: n,
            ..*self
        }
    }

    pub fn mask_positions(&self) -> impl Iterator<Item = usize> + '_ {
        let mask = self.mask_id;
        self.tokens
            .iter()
            .enumerate()
            .filter(move |(_, &t)| t == mask)
            .map(|(i, _)| i)
    }

    /// Block index holding absolute position `pos`, if it is in the generated region.
    pub fn block_of(&self, pos: usize) -> Option<usize> {
        if pos < self.prompt_len || pos >= self.tokens.len() {
            None
        } else {
            Some((pos - self.prompt_len) / self.block_len)
        }
    }
}
