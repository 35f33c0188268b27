pub mod ab;
pub mod bank;
pub mod corpus;
pub mod curation;
pub mod embed;
pub mod metrics;
pub mod prompt;
pub mod report;
pub mod synth;
pub mod text;
