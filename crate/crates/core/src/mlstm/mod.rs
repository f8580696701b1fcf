//! Matrix-memory LSTM: the stabilized cell, its standalone parameter form and
//! the ViL residual block.

mod block;
pub mod cell;
mod params;

pub use block::{BlockConfig, VilBlock};
pub use cell::{head_sequence, head_sequence_chunked, head_step, HeadState, STABILIZER_INIT};
pub use params::{forget_bias_init, mlstm_sequence, mlstm_sequence_chunked, mlstm_step, MlstmLayer, MlstmParams, MlstmState};
