pub mod agent;
pub mod dataset;
pub mod env;
pub mod gateway;
pub mod harness;
pub mod instruction;
pub mod memory;
pub mod planner;
pub mod prompts;
pub mod recipe;
pub mod teacher;
