//! Frame serialization and tokenization.
//!
//! Frames are rendered to a canonical text form,
//! `ID <h> <h> <h> DLC <d> D <b> <b> ...`, where the arbitration id appears
//! as three hex nibbles and each payload byte as two. A closed nibble-level
//! vocabulary (~26 tokens) then maps the text to fixed-length id sequences
//! with architecture-specific special tokens: encoders get
//! `[CLS] ... [SEP]` and pool at position 0, decoders get `[BOS] ... [EOS]`
//! and pool at the `[EOS]` position.
//!
//! Timestamps are excluded from the default serialization (they trivially
//! leak injection periodicity); both the timestamp and the DLC field are
//! config switches.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::can::{AttackClass, CanFrame, LabeledRecord};
use crate::fnv1a64;

/// Default fixed sequence length; covers the longest frame with room to
/// spare (3 id nibbles + dlc digit + 16 payload nibbles + structure tokens).
pub const MAX_LEN_DEFAULT: usize = 48;

/// Classifier architecture; decides special tokens and pooling position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Encoder,
    Decoder,
}

impl Arch {
    pub fn parse_name(s: &str) -> Option<Arch> {
        match s.trim().to_ascii_lowercase().as_str() {
            "encoder" => Some(Arch::Encoder),
            "decoder" => Some(Arch::Decoder),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Encoder => "encoder",
            Arch::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TextifyError {
    #[error("token {0:?} not in vocabulary")]
    UnknownToken(String),
    #[error("token id {0} not in vocabulary")]
    UnknownId(u32),
    #[error("sequence needs {needed} positions but max_len is {max_len}")]
    SequenceTooLong { needed: usize, max_len: usize },
    #[error("vocab file malformed at line {line}: {reason}")]
    MalformedVocabFile { line: usize, reason: String },
    #[error("pooling index {pooling} outside the real prefix of length {real_len}")]
    InvalidPoolingIndex { pooling: usize, real_len: usize },
}

/// Closed token vocabulary with dense ids and `[PAD]` fixed at id 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

const SPECIALS: [&str; 6] = ["[PAD]", "[CLS]", "[SEP]", "[BOS]", "[EOS]", "[UNK]"];
const VOCAB_FILE_VERSION: u32 = 1;

impl Vocab {
    /// The built-in vocabulary: specials, 16 hex nibbles (dlc digits reuse
    /// the first nine), and the structural tokens.
    pub fn built_in() -> Vocab {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for n in 0..16u32 {
            tokens.push(format!("{n:x}"));
        }
        for s in ["ID", "DLC", "D", "|"] {
            tokens.push(s.to_string());
        }
        Vocab::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn pad(&self) -> u32 {
        0
    }
    pub fn cls(&self) -> u32 {
        1
    }
    pub fn sep(&self) -> u32 {
        2
    }
    pub fn bos(&self) -> u32 {
        3
    }
    pub fn eos(&self) -> u32 {
        4
    }
    pub fn unk(&self) -> u32 {
        5
    }

    fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Version tag stored in checkpoints; changes whenever the token table
    /// changes.
    pub fn version(&self) -> String {
        let mut bytes = Vec::new();
        for (i, t) in self.tokens.iter().enumerate() {
            bytes.extend_from_slice(t.as_bytes());
            bytes.push(b'\t');
            bytes.extend_from_slice(i.to_string().as_bytes());
            bytes.push(b'\n');
        }
        format!("v{}:{:016x}", VOCAB_FILE_VERSION, fnv1a64(&bytes))
    }

    /// Serializes as the versioned `token<TAB>id` text format.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("#canids-vocab\t{VOCAB_FILE_VERSION}\n");
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Vocab, TextifyError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(TextifyError::MalformedVocabFile {
            line: 1,
            reason: "empty file".into(),
        })?;
        if header.trim() != format!("#canids-vocab\t{VOCAB_FILE_VERSION}") {
            return Err(TextifyError::MalformedVocabFile {
                line: 1,
                reason: format!("unexpected header {header:?}"),
            });
        }
        let mut tokens = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (token, id) = line.split_once('\t').ok_or(TextifyError::MalformedVocabFile {
                line: i + 1,
                reason: "missing tab".into(),
            })?;
            let id: usize = id.trim().parse().map_err(|_| TextifyError::MalformedVocabFile {
                line: i + 1,
                reason: format!("bad id {id:?}"),
            })?;
            if id != tokens.len() {
                return Err(TextifyError::MalformedVocabFile {
                    line: i + 1,
                    reason: format!("ids not dense: expected {}, found {id}", tokens.len()),
                });
            }
            tokens.push(token.to_string());
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// Which frame fields enter the serialized text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializeOptions {
    /// Prefix the text with `| <digit> ... |` timestamp microseconds.
    /// Off by default: timestamps leak injection periodicity.
    pub include_timestamp: bool,
    /// Include the `DLC <d>` field. On by default.
    pub include_dlc: bool,
}

impl Default for SerializeOptions {
    fn default() -> SerializeOptions {
        SerializeOptions {
            include_timestamp: false,
            include_dlc: true,
        }
    }
}

/// Canonical serialization with default options.
pub fn serialize_frame(frame: &CanFrame) -> String {
    serialize_frame_with(frame, SerializeOptions::default())
}

/// Serialization with explicit field switches. Injective over
/// (can_id, dlc, data) for any fixed option set.
pub fn serialize_frame_with(frame: &CanFrame, opts: SerializeOptions) -> String {
    let mut out = String::new();
    if opts.include_timestamp {
        out.push_str("| ");
        for digit in frame.timestamp_us.to_string().chars() {
            out.push(digit);
            out.push(' ');
        }
        out.push_str("| ");
    }
    out.push_str("ID");
    for shift in [8u16, 4, 0] {
        out.push_str(&format!(" {:x}", (frame.can_id >> shift) & 0xF));
    }
    if opts.include_dlc {
        out.push_str(&format!(" DLC {}", frame.dlc));
    }
    out.push_str(" D");
    for b in &frame.data {
        out.push_str(&format!(" {:x} {:x}", b >> 4, b & 0xF));
    }
    out
}

/// A tokenized frame padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    /// Token ids, length `max_len`, `[PAD]` after the real prefix.
    pub ids: Vec<u32>,
    /// Number of real (unpadded) positions; the attention mask is ones over
    /// this prefix.
    pub real_len: usize,
    /// Position pooled as the sequence representation: 0 for encoders, the
    /// `[EOS]` position for decoders.
    pub pooling_index: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Ones over the real prefix, zeros over padding.
    pub fn attention_mask(&self) -> Vec<u8> {
        (0..self.ids.len()).map(|i| u8::from(i < self.real_len)).collect()
    }

    fn validate(&self) -> Result<(), TextifyError> {
        if self.pooling_index >= self.real_len {
            return Err(TextifyError::InvalidPoolingIndex {
                pooling: self.pooling_index,
                real_len: self.real_len,
            });
        }
        Ok(())
    }
}

/// Tokenizes serialized frame text. Unknown tokens are an error, never a
/// silent `[UNK]`: inputs are machine-generated. Truncation is forbidden.
pub fn tokenize(
    text: &str,
    arch: Arch,
    max_len: usize,
    vocab: &Vocab,
) -> Result<TokenSequence, TextifyError> {
    let mut body = Vec::new();
    for word in text.split_whitespace() {
        let id = vocab
            .id(word)
            .ok_or_else(|| TextifyError::UnknownToken(word.to_string()))?;
        body.push(id);
    }
    let needed = body.len() + 2;
    if needed > max_len {
        return Err(TextifyError::SequenceTooLong { needed, max_len });
    }
    let (open, close, pooling_index) = match arch {
        Arch::Encoder => (vocab.cls(), vocab.sep(), 0),
        Arch::Decoder => (vocab.bos(), vocab.eos(), needed - 1),
    };
    let mut ids = Vec::with_capacity(max_len);
    ids.push(open);
    ids.extend_from_slice(&body);
    ids.push(close);
    ids.resize(max_len, vocab.pad());
    let seq = TokenSequence {
        ids,
        real_len: needed,
        pooling_index,
    };
    seq.validate()?;
    Ok(seq)
}

/// Inverse of [`tokenize`] up to special tokens and padding.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocab) -> Result<String, TextifyError> {
    let mut words = Vec::new();
    for &id in &seq.ids[..seq.real_len] {
        if vocab.token(id).is_none() {
            return Err(TextifyError::UnknownId(id));
        }
        if !vocab.is_special(id) {
            words.push(vocab.token(id).unwrap());
        }
    }
    Ok(words.join(" "))
}

/// Tokenizes a record batch, order-preserving, labels aligned by index.
pub fn encode_batch(
    records: &[LabeledRecord],
    arch: Arch,
    max_len: usize,
    vocab: &Vocab,
) -> Result<(Vec<TokenSequence>, Vec<AttackClass>), TextifyError> {
    let mut seqs = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for rec in records {
        seqs.push(tokenize(&serialize_frame(&rec.frame), arch, max_len, vocab)?);
        labels.push(rec.label);
    }
    Ok((seqs, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::can::CanFrame;
    use proptest::prelude::*;

    #[test]
    fn canonical_form_matches_examples() {
        let frame = CanFrame::new(0, 0x316, vec![0x05, 0x21]).unwrap();
        assert_eq!(serialize_frame(&frame), "ID 3 1 6 DLC 2 D 0 5 2 1");
        let empty = CanFrame::new(0, 0x000, vec![]).unwrap();
        assert_eq!(serialize_frame(&empty), "ID 0 0 0 DLC 0 D");
    }

    #[test]
    fn serialization_is_injective_over_small_enumeration() {
        let mut seen = std::collections::HashSet::new();
        for id in 0u16..=0x7FF {
            for dlc in 0u8..=1 {
                let data = vec![0xab; dlc as usize];
                let frame = CanFrame::new(0, id, data).unwrap();
                assert!(seen.insert(serialize_frame(&frame)));
            }
        }
        // Same id, different payload byte values collide nowhere either.
        for b in 0u8..=255 {
            let frame = CanFrame::new(0, 0x100, vec![b, !b]).unwrap();
            assert!(seen.insert(serialize_frame(&frame)));
        }
    }

    #[test]
    fn vocab_is_dense_with_pad_zero() {
        let v = Vocab::built_in();
        assert_eq!(v.id("[PAD]"), Some(0));
        assert_eq!(v.len(), 26);
        for i in 0..v.len() as u32 {
            let t = v.token(i).unwrap();
            assert_eq!(v.id(t), Some(i));
        }
    }

    #[test]
    fn encoder_tokenization_structure() {
        // "ID 0 0 0 DLC 0 D" has 7 body tokens, so 9 real positions with
        // the two specials.
        let v = Vocab::built_in();
        let seq = tokenize("ID 0 0 0 DLC 0 D", Arch::Encoder, 12, &v).unwrap();
        let expected_prefix = vec![
            v.cls(),
            v.id("ID").unwrap(),
            v.id("0").unwrap(),
            v.id("0").unwrap(),
            v.id("0").unwrap(),
            v.id("DLC").unwrap(),
            v.id("0").unwrap(),
            v.id("D").unwrap(),
            v.sep(),
        ];
        assert_eq!(&seq.ids[..9], &expected_prefix[..]);
        assert_eq!(&seq.ids[9..], &[v.pad(); 3]);
        assert_eq!(seq.real_len, 9);
        assert_eq!(seq.pooling_index, 0);
        assert_eq!(
            seq.attention_mask(),
            vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0]
        );
    }

    #[test]
    fn decoder_pools_at_eos() {
        let v = Vocab::built_in();
        let seq = tokenize("ID 0 0 0 DLC 0 D", Arch::Decoder, 12, &v).unwrap();
        assert_eq!(seq.ids[0], v.bos());
        assert_eq!(seq.ids[8], v.eos());
        assert_eq!(seq.pooling_index, 8);
    }

    #[test]
    fn unknown_token_is_an_error_not_unk() {
        let v = Vocab::built_in();
        assert_eq!(
            tokenize("ID xyz", Arch::Encoder, 12, &v).unwrap_err(),
            TextifyError::UnknownToken("xyz".into())
        );
    }

    #[test]
    fn truncation_is_forbidden() {
        let v = Vocab::built_in();
        let err = tokenize("ID 0 0 0 DLC 0 D", Arch::Encoder, 8, &v).unwrap_err();
        assert_eq!(
            err,
            TextifyError::SequenceTooLong {
                needed: 9,
                max_len: 8
            }
        );
    }

    #[test]
    fn detokenize_inverts_and_rejects_bad_ids() {
        let v = Vocab::built_in();
        let text = "ID 3 1 6 DLC 2 D 0 5 2 1";
        let seq = tokenize(text, Arch::Encoder, 48, &v).unwrap();
        assert_eq!(detokenize(&seq, &v).unwrap(), text);

        let mut broken = seq.clone();
        broken.ids[3] = 999;
        assert_eq!(detokenize(&broken, &v).unwrap_err(), TextifyError::UnknownId(999));
    }

    #[test]
    fn encode_batch_is_elementwise() {
        let v = Vocab::built_in();
        let records: Vec<LabeledRecord> = (0..4)
            .map(|i| {
                LabeledRecord::new(
                    CanFrame::new(i, 0x100 + i as u16, vec![i as u8; 8]).unwrap(),
                    AttackClass::DoS,
                )
            })
            .collect();
        let (seqs, labels) = encode_batch(&records, Arch::Encoder, 48, &v).unwrap();
        assert_eq!(seqs.len(), 4);
        assert_eq!(labels, vec![AttackClass::DoS; 4]);
        for (seq, rec) in seqs.iter().zip(&records) {
            let alone =
                tokenize(&serialize_frame(&rec.frame), Arch::Encoder, 48, &v).unwrap();
            assert_eq!(*seq, alone);
        }
        let (empty, empty_labels) = encode_batch(&[], Arch::Encoder, 48, &v).unwrap();
        assert!(empty.is_empty() && empty_labels.is_empty());
    }

    #[test]
    fn vocab_tsv_round_trip() {
        let v = Vocab::built_in();
        let tsv = v.to_tsv();
        let back = Vocab::from_tsv(&tsv).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.version(), v.version());
        assert!(Vocab::from_tsv("#garbage\n").is_err());
    }

    #[test]
    fn optional_fields_change_the_text() {
        let frame = CanFrame::new(1234, 0x316, vec![0xff]).unwrap();
        let with_ts = serialize_frame_with(
            &frame,
            SerializeOptions {
                include_timestamp: true,
                include_dlc: true,
            },
        );
        assert_eq!(with_ts, "| 1 2 3 4 | ID 3 1 6 DLC 1 D f f");
        let no_dlc = serialize_frame_with(
            &frame,
            SerializeOptions {
                include_timestamp: false,
                include_dlc: false,
            },
        );
        assert_eq!(no_dlc, "ID 3 1 6 D f f");
        // Both variants stay tokenizable with the built-in vocab.
        let v = Vocab::built_in();
        assert!(tokenize(&with_ts, Arch::Encoder, 48, &v).is_ok());
        assert!(tokenize(&no_dlc, Arch::Decoder, 48, &v).is_ok());
    }

    proptest! {
        #[test]
        fn tokenize_round_trip(
            id in 0u16..=0x7FF,
            data in proptest::collection::vec(any::<u8>(), 0..=8),
            arch in prop_oneof![Just(Arch::Encoder), Just(Arch::Decoder)],
        ) {
            let v = Vocab::built_in();
            let frame = CanFrame::new(0, id, data).unwrap();
            let text = serialize_frame(&frame);
            let seq = tokenize(&text, arch, MAX_LEN_DEFAULT, &v).unwrap();
            prop_assert_eq!(detokenize(&seq, &v).unwrap(), text);
            // Pooling index sits where the architecture demands.
            match arch {
                Arch::Encoder => prop_assert_eq!(seq.pooling_index, 0),
                Arch::Decoder => prop_assert_eq!(seq.pooling_index, seq.real_len - 1),
            }
        }
    }
}
