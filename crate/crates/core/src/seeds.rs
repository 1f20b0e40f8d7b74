//! Expands one run seed into per-stage seeds.
//!
//! `stage_seed(run, round, stage) = splitmix64(run ^ splitmix64((round << 8) | stage_tag))`
//! with stage tags teacher=1, student=2, finetune=3. Each derived seed then
//! seeds that stage's ChaCha8 shuffle stream.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Teacher = 1,
    Student = 2,
    Finetune = 3,
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stage_seed(run_seed: u64, round: u32, stage: Stage) -> u64 {
    splitmix64(run_seed ^ splitmix64((u64::from(round) << 8) | stage as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSeeds {
    pub teacher: u64,
    pub student: u64,
    pub finetune: u64,
}

impl RoundSeeds {
    pub fn derive(run_seed: u64, round: u32) -> Self {
        RoundSeeds {
            teacher: stage_seed(run_seed, round, Stage::Teacher),
            student: stage_seed(run_seed, round, Stage::Student),
            finetune: stage_seed(run_seed, round, Stage::Finetune),
        }
    }
}
