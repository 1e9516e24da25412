//! Closed-form multiply-accumulate counts for one forward pass.

use serde::{Deserialize, Serialize};

use super::model::ArchConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacReport {
    pub classifier: u64,
    /// One expert (hard gating runs exactly one).
    pub expert: u64,
    pub mapper_mix: u64,
    pub mapper_dense: u64,
}

impl MacReport {
    pub fn mapper(&self) -> u64 {
        self.mapper_mix + self.mapper_dense
    }

    /// Classifier + one expert + mapper.
    pub fn total(&self) -> u64 {
        self.classifier + self.expert + self.mapper()
    }

    /// Classifier + all `regions` experts + mapper.
    pub fn total_soft(&self, regions: usize) -> u64 {
        self.classifier + self.expert * regions as u64 + self.mapper()
    }
}

fn conv_stack(positions: u64, c_in: u64, width: u64, depth: u64) -> u64 {
    9 * positions * (c_in * width + width * width * (depth - 1))
}

pub fn mac_count(arch: &ArchConfig) -> MacReport {
    let e = arch.positions() as u64;
    let w = arch.expert_width as u64;
    let cw = arch.classifier_width as u64;
    MacReport {
        classifier: conv_stack(e, 2, cw, arch.classifier_depth as u64) + cw * arch.regions as u64,
        expert: conv_stack(e, 2, w, arch.expert_depth as u64),
        mapper_mix: e * w * w,
        mapper_dense: e * w * arch.output_len() as u64,
    }
}
