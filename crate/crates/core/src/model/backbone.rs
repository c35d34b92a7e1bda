//! Image backbones: a few-layer tiny backbone for desk-scale runs and a
//! residual backbone for full-scale training (weights always trained from
//! scratch; pretrained loading is a checkpoint concern).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::nn::{Conv2d, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    /// Plain strided 3x3 conv stack.
    Tiny { channels: Vec<usize>, strides: Vec<usize> },
    /// Conv stem + residual stages, downsampling between stages.
    Residual {
        stem_channels: usize,
        stage_channels: Vec<usize>,
        blocks_per_stage: usize,
    },
}

impl BackboneSpec {
    pub fn tiny_default() -> Self {
        BackboneSpec::Tiny { channels: vec![16, 32, 32], strides: vec![2, 2, 2] }
    }

    pub fn residual_default() -> Self {
        BackboneSpec::Residual {
            stem_channels: 32,
            stage_channels: vec![64, 128, 256],
            blocks_per_stage: 2,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            BackboneSpec::Tiny { strides, .. } => strides.iter().product(),
            // stem halves once, then every stage transition halves again
            BackboneSpec::Residual { stage_channels, .. } => 1 << stage_channels.len(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            BackboneSpec::Tiny { channels, .. } => *channels.last().expect("empty channels"),
            BackboneSpec::Residual { stage_channels, .. } => {
                *stage_channels.last().expect("empty stages")
            }
        }
    }
}

enum Block {
    Plain(Conv2d),
    Residual { conv1: Conv2d, conv2: Conv2d },
}

pub struct Backbone {
    blocks: Vec<Block>,
    stride: usize,
    out_channels: usize,
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, spec: &BackboneSpec) -> Self {
        let mut blocks = Vec::new();
        match spec {
            BackboneSpec::Tiny { channels, strides } => {
                assert_eq!(channels.len(), strides.len(), "channels/strides mismatch");
                assert!(!channels.is_empty());
                let mut cin = 3;
                for (i, (&cout, &s)) in channels.iter().zip(strides).enumerate() {
                    blocks.push(Block::Plain(Conv2d::new(
                        store,
                        rng,
                        &format!("backbone.conv{i}"),
                        cin,
                        cout,
                        3,
                        s,
                        1,
                    )));
                    cin = cout;
                }
            }
            BackboneSpec::Residual { stem_channels, stage_channels, blocks_per_stage } => {
                assert!(!stage_channels.is_empty());
                blocks.push(Block::Plain(Conv2d::new(
                    store,
                    rng,
                    "backbone.stem",
                    3,
                    *stem_channels,
                    3,
                    2,
                    1,
                )));
                let mut cin = *stem_channels;
                for (si, &cout) in stage_channels.iter().enumerate() {
                    // stage 0 keeps the stem resolution; later stages halve it
                    blocks.push(Block::Plain(Conv2d::new(
                        store,
                        rng,
                        &format!("backbone.stage{si}.down"),
                        cin,
                        cout,
                        3,
                        if si == 0 { 1 } else { 2 },
                        1,
                    )));
                    cin = cout;
                    for bi in 0..*blocks_per_stage {
                        blocks.push(Block::Residual {
                            conv1: Conv2d::new(
                                store,
                                rng,
                                &format!("backbone.stage{si}.block{bi}.conv1"),
                                cout,
                                cout,
                                3,
                                1,
                                1,
                            ),
                            conv2: Conv2d::new(
                                store,
                                rng,
                                &format!("backbone.stage{si}.block{bi}.conv2"),
                                cout,
                                cout,
                                3,
                                1,
                                1,
                            ),
                        });
                    }
                }
            }
        }
        Backbone { blocks, stride: spec.stride(), out_channels: spec.out_channels() }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, mut x: NodeId) -> NodeId {
        for block in &self.blocks {
            match block {
                Block::Plain(conv) => {
                    let y = conv.forward(tape, store, x);
                    x = tape.relu(y);
                }
                Block::Residual { conv1, conv2 } => {
                    let y = conv1.forward(tape, store, x);
                    let y = tape.relu(y);
                    let y = conv2.forward(tape, store, y);
                    let sum = tape.add(x, y);
                    x = tape.relu(sum);
                }
            }
        }
        x
    }
}
