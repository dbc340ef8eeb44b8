mod attention;
mod basic;
mod conv;
mod linear;
mod loss;
mod norm;
mod spectral;

pub use attention::attention;
pub use attention::attention_weights;
pub use basic::{
    add, add_const, add_scalars, concat, dot_const, mul_const, permute, prelu, relu, repeat_leading,
    reshape, scale, silu, slice, sub, sum_all,
};
pub use conv::{conv1d, ConvAxis};
pub use linear::{grouped_linear_last, linear_ch, matmul_const};
pub use loss::{magnitude_l1_ratio, si_sdr_db, MAG_NORM_FLOOR, SI_SDR_CAP_DB};
pub use norm::{batch_norm_eval, batch_norm_train, group_norm, layer_norm_ch, BatchStats};
pub use spectral::{istft, stft};
