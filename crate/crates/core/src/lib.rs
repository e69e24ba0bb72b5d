//! Spin-correlation experiments, hidden-variable distributions, frame
//! reconstruction from logbook statistics, and geodesics of a stationary
//! model space-time.
//!
//! Every stochastic routine takes an explicit seed or [`RandomStream`] and
//! produces the same output regardless of the rayon thread count.

pub mod experiment;
pub mod frame;
pub mod geodesic;
pub mod geometry;
pub mod hidden;
pub mod quadrature;

pub use experiment::{
    chsh, estimate_pair_stats, generate_logbook, read_logbook_csv, run_pair, write_logbook_csv, Backend, ChshEstimate,
    ChshSettings, CorrelationLaw, ExperimentError, Mark, Measurement, Outcome, PairCount, PairStats, Post, Schedule,
    Side, Spin, TripletRecord,
};
pub use frame::{
    align_and_score, angles_from_stats, embed_on_sphere, embeddability_test, intra_post_angles, AlignmentReport,
    AngleMatrix, EmbedOptions, EmbeddabilityReport, EmbeddingSolution, FrameError, Hypothesis, MarkKey,
};
pub use geodesic::{
    classify_orbit, constants_from_state, integrate, state_from_constants, GeodesicConstants, GeodesicError,
    GeodesicReport, GeodesicState, OrbitClass, Trajectory,
};
pub use geometry::{angle_between, Angle, RandomStream, UnitVec};
pub use hidden::{
    fit_discrete_density, verify_marginals, ConstraintReport, ConstraintSet, DiscreteDensity, HiddenError,
    HiddenTriple, Objective, SamplerKind,
};
