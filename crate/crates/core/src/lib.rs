//! Robust aggregation of site-specific conditional average treatment
//! effect (CATE) models for a target population described as a mixture of
//! the source sites.
//!
//! The core operation finds ensemble weights minimizing worst-case regret
//! over all mixtures of the sites (a convex QP over the simplex), with
//! variants for relative-risk criteria and a two-site closed form. The
//! crate also ships site-level meta-learners (T, X, DR), a Monte Carlo
//! benchmark harness, and CSV/JSON interchange.

pub mod aggregate;
pub mod error;
pub mod io;
pub mod learners;
pub mod linalg;
pub mod oracle;
pub mod qp;
pub mod rng;
pub mod sim;

pub use aggregate::{
    estimate_gamma, empirical_regret, fit_pooled, fit_regret_ensemble,
    fit_relative_risk_ensemble, fit_risk_2site_ensemble, risk_2site_weight,
    CatePredictionMatrix, Diagnostics, EnsembleCateModel, MethodTag,
};
pub use error::{CateForgeError, Result};
pub use learners::{
    fit_cate_learner, BaseConfig, LearnerConfig, MetaLearnerKind, PropensityConfig,
    SharedPredictor, SiteDataset,
};
pub use qp::{
    project_to_simplex, solve_regret_qp, solve_regret_qp_polytope,
    solve_relative_risk_qp, GammaSystem, PolytopeSpec, QpOptions, WeightSolution,
};
pub use sim::{
    make_allocation, run_replication, run_study, sample_site_params, AllocationScenario,
    DgpConfig, Half, Method, ReplicationReport, Setting, SiteModelSpec, StudyTable,
    TrueCateBank,
};
