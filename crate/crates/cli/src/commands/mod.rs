pub mod estimate;
pub mod instruments;
pub mod mc;
pub mod shared;
pub mod twostar;
