pub mod autodiff;
pub mod bitops;
pub mod checkpoint;
pub mod data;
pub mod quant;
pub mod trainer;
pub mod vit;
