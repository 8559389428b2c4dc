//! Multimodal sequential recommendation through keyword summaries.
//!
//! The pipeline has three stages:
//!
//! 1. [`summarizer`] turns every item (cover image + title + description) into
//!    cover and content keyword lists, and scores summaries with verifiable
//!    rewards suitable for group-relative policy optimization.
//! 2. [`retriever`] trains a small self-attention next-item model on item ids,
//!    embeds user histories and retrieves similar training users whose next
//!    interactions serve as collaborative context.
//! 3. [`promptkit`] and [`recommender`] render instruction prompts from those
//!    keywords, score candidates with the first-token yes/no probability and
//!    report HR@5, NDCG@5 and AUC.
//!
//! Every model call goes through the contracts in [`backends`]. The
//! deterministic [`backends::MockBackend`] makes every stage reproducible on a
//! laptop; [`backends::RemoteBackend`] adapts an HTTP model server.
//! [`pipeline`] wires the stages together with file artifacts and a run
//! manifest.

pub mod backends;
pub mod corpus;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod promptkit;
pub mod recommender;
pub mod retriever;
pub mod summarizer;
pub mod synth;
pub mod text;
pub mod util;

pub use error::{Error, Result};
