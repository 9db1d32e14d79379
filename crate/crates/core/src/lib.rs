//! Desk-scale simulator for targeted data poisoning of news recommenders.

pub mod agent;
pub mod corpus;
pub mod embeddings;
pub mod harness;
pub mod hiertree;
pub mod influence;
pub mod recommender;
pub mod risk;
