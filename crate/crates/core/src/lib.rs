// Copyright 2026 The Ephemera Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Deterministic simulation of ephemeral federated analytics: devices run
//! the client half of a split Group-By-Sum query over cached trip records,
//! servers aggregate focused updates exactly once per token, and windows
//! are released through one of three Laplace mechanisms.
//!
//! Module map: [`model`], [`histogram`] and [`exact`] hold the data types;
//! [`query`] parses and gates queries; [`client`], [`server`] and
//! [`aggcore`] implement the protocol; [`dp`] the mechanisms; [`sim`]
//! drives a fleet; [`eval`] generates corpora and scores releases;
//! [`config`] and [`experiment`] back the command-line tool.

// Several validators rely on NaN failing a positive comparison.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggcore;
pub mod client;
pub mod config;
pub mod dp;
pub mod eval;
pub mod experiment;
pub mod exact;
pub mod histogram;
pub mod model;
pub mod query;
pub mod rng;
pub mod server;
pub mod sim;
pub mod time;
