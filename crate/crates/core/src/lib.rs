pub mod eval_metrics;
pub mod forest_impute;
pub mod matrix_io;
pub mod simulate;
pub mod zinb_dropout;
