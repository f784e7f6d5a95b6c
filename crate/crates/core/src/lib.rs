//! Partially-linear-model (PLM) estimation where the nuisance functions are
//! learned by an over-parameterized two-layer network, together with the
//! classical baselines it is measured against.
//!
//! The pipeline: a feature selector (Lasso by cyclic coordinate descent)
//! splits a design matrix into a selected block `D` and an unselected block
//! `Z`; the conditional expectations `E(y|Z)` and `E(D|Z)` are learned by a
//! single jointly-trained wide network (or by Nadaraya-Watson kernel
//! regression, or cross-fitted per-fold learners); partialling out reduces the
//! model to an intercept-free OLS in residuals, which yields the coefficient
//! estimate, standard errors, and confidence intervals.
//!
//! Modules:
//! - [`synth`]: seeded synthetic generators and CSV ingestion
//! - [`selection`]: Lasso solver and design partitioning
//! - [`widenet`]: the two-layer network, its loss/gradient, and training
//! - [`ntk`]: empirical and infinite-width tangent kernels, rate/drift checks
//! - [`kernel`]: Nadaraya-Watson regression with bandwidth cross-validation
//! - [`plm`]: partialling-out estimators (joint-net, kernel, cross-fitted)
//! - [`debias`]: the full selection-then-PLM pipeline and debiasing baselines
//! - [`bench`]: seeded experiment harness, metrics, and exports

pub mod bench;
pub mod debias;
pub mod error;
pub mod kernel;
pub mod ntk;
pub mod plm;
pub mod selection;
pub mod synth;
pub mod widenet;

pub use error::{Error, Result};
