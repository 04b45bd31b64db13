//! Vibration-as-audio bearing fault diagnosis: synthetic bench data, a
//! template corpus, a small LoRA-adapted audio-text model trained in two
//! stages, greedy label generation, metrics, a CLI and an HTTP gateway.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod diagnose;
pub mod evalkit;
pub mod experiment;
pub mod gateway;
pub mod net;
pub mod optim;
pub mod sigproc;
pub mod synth;
pub mod textcodec;
