//! Compiles every code snippet in the guide (`book/`) as a doc-test, so
//! the book can never drift from the library. Each item below pulls one
//! chapter in verbatim; `cargo test --doc` runs them all.

#![allow(dead_code)]

#[doc = include_str!("../../../book/src/introduction.md")]
struct Introduction;

#[doc = include_str!("../../../book/src/getting-started.md")]
struct GettingStarted;

#[doc = include_str!("../../../book/src/tensors.md")]
struct Tensors;

#[doc = include_str!("../../../book/src/layers.md")]
struct Layers;

#[doc = include_str!("../../../book/src/blocks.md")]
struct Blocks;

#[doc = include_str!("../../../book/src/freezing.md")]
struct Freezing;

#[doc = include_str!("../../../book/src/collapsing.md")]
struct Collapsing;

#[doc = include_str!("../../../book/src/training.md")]
struct Training;

#[doc = include_str!("../../../book/src/evaluation.md")]
struct Evaluation;

#[doc = include_str!("../../../book/src/weight-files.md")]
struct WeightFiles;
