//! Bundled toy-protocol parsers with message generators and ground truth.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::{assemble, crc16, ParserScript};
use crate::eval::{GroundTruth, TrueField};
use crate::semantics::{SemanticFunction as F, SemanticType as T};
use crate::trace::Message;

pub const DNP3_LIKE_SRC: &str = include_str!("scripts/dnp3_like.s");
pub const TEXT_KV_SRC: &str = include_str!("scripts/text_kv.s");

/// Generated messages and their truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub messages: Vec<Message>,
    pub truth: GroundTruth,
}

type Generator = fn(&mut ChaCha8Rng, usize) -> (Vec<u8>, Vec<TrueField>);

#[derive(Debug, Clone)]
pub struct BundledParser {
    pub name: &'static str,
    pub script: ParserScript,
    generator: Generator,
}

impl BundledParser {
    /// `count` valid messages, deterministic in `seed`.
    pub fn generate(&self, count: usize, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut corpus = Corpus::default();
        for i in 0..count {
            let (bytes, fields) = (self.generator)(&mut rng, i);
            let id = format!("{}-{i:04}", self.name);
            corpus.truth.insert(id.clone(), fields).expect("generator truth partitions the message");
            corpus.messages.push(Message::new(id, bytes).expect("generated messages are non-empty"));
        }
        corpus
    }
}

fn byte(rng: &mut ChaCha8Rng) -> u8 {
    rng.next_u32() as u8
}

pub const DNP3_LEN: usize = 23;
pub const DNP3_CONTROLS: [u8; 3] = [0x44, 0x73, 0xc4];

fn gen_dnp3(rng: &mut ChaCha8Rng, _i: usize) -> (Vec<u8>, Vec<TrueField>) {
    let control = DNP3_CONTROLS[(rng.next_u32() % 3) as usize];
    let mut m = alloc::vec![0x05, 0x64, 13, control, 0x01, 0x00, byte(rng), byte(rng)];
    let hcrc = crc16(&m[2..8]);
    m.extend_from_slice(&hcrc.to_le_bytes());
    let mut fields = alloc::vec![
        TrueField::new(0, 1, T::Static, &[]),
        TrueField::new(2, 2, T::Integer, &[F::Length]),
        TrueField::new(3, 3, T::Group, &[F::Command]),
        TrueField::new(4, 5, T::Integer, &[]),
        TrueField::new(6, 7, T::Integer, &[]),
        TrueField::new(8, 9, T::Integer, &[F::Checksum]),
    ];
    match control {
        0x44 => {
            let data: Vec<u8> = (0..11).map(|_| byte(rng)).collect();
            m.extend_from_slice(&data);
            m.extend_from_slice(&crc16(&data).to_le_bytes());
            fields.push(TrueField::new(10, 20, T::Bytes, &[]));
            fields.push(TrueField::new(21, 22, T::Integer, &[F::Checksum]));
        }
        0x73 => {
            m.extend((0..13).map(|_| byte(rng)));
            fields.push(TrueField::new(10, 11, T::Integer, &[]));
            fields.push(TrueField::new(12, 22, T::Bytes, &[]));
        }
        _ => {
            m.extend((0..13).map(|_| byte(rng)));
            fields.push(TrueField::new(10, 13, T::Integer, &[]));
            fields.push(TrueField::new(14, 22, T::Bytes, &[]));
        }
    }
    debug_assert_eq!(m.len(), DNP3_LEN);
    (m, fields)
}

pub const TEXT_VERBS: [&str; 3] = ["GET", "PUT", "DEL"];

fn gen_text(rng: &mut ChaCha8Rng, _i: usize) -> (Vec<u8>, Vec<TrueField>) {
    let verb = TEXT_VERBS[(rng.next_u32() % 3) as usize];
    let mut m = Vec::from(verb.as_bytes());
    m.extend_from_slice(b" /");
    m.extend((0..4).map(|_| b'a' + (rng.next_u32() % 26) as u8));
    m.extend_from_slice(b".txt\r\n");
    let fields = alloc::vec![
        TrueField::new(0, 2, T::Group, &[F::Command]),
        TrueField::new(3, 3, T::Group, &[F::Delim]),
        TrueField::new(4, 12, T::String, &[F::Filename]),
        TrueField::new(13, 14, T::Group, &[F::Delim]),
    ];
    (m, fields)
}

pub fn dnp3_like() -> BundledParser {
    BundledParser {
        name: "dnp3_like",
        script: assemble("dnp3_like", DNP3_LIKE_SRC).expect("bundled script assembles"),
        generator: gen_dnp3,
    }
}

pub fn text_kv() -> BundledParser {
    BundledParser {
        name: "text_kv",
        script: assemble("text_kv", TEXT_KV_SRC).expect("bundled script assembles"),
        generator: gen_text,
    }
}

pub fn bundled_parsers() -> Vec<BundledParser> {
    alloc::vec![dnp3_like(), text_kv()]
}

pub fn find(name: &str) -> Option<BundledParser> {
    bundled_parsers().into_iter().find(|p| p.name == name)
}
