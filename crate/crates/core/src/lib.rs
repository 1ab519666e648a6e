pub mod code;
pub mod geometry;
pub mod imaging;
pub mod networks;
pub mod sprites;
pub mod objectives;
pub mod checkpoint;
pub mod trainer;
pub mod reasoning;
pub mod metrics;
