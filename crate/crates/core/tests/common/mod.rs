pub mod gradsuite;
pub mod loss_checks;
pub mod metric_oracles;
