pub mod corpus;
pub mod cli;
pub mod criticality;
pub mod dirichlet;
pub mod discretization;
pub mod eigensolver;
pub mod identities;
pub mod error;
pub(crate) mod linalg;
pub mod morrey;
pub mod operator;
