pub mod broadcast;
pub mod conv;
pub mod linalg;
pub mod resample;
