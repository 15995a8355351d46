pub mod cli;
pub mod decision;
pub mod grouping;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod schema;
