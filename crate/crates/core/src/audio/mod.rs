//! WAV ingestion and the fixed preprocessing chain: mono, 16 kHz, 30 s cap,
//! z-score normalisation and zero padding to whole 40 ms patches.

pub mod clip;
pub mod dsp;
pub mod wav;

pub use clip::{normalize_pad, preprocess_file, AudioClip, MAX_SAMPLES, MAX_SECONDS, PATCH_SAMPLES};
pub use dsp::{resample, resample_16k, to_mono, TARGET_RATE};
pub use wav::{load_wav, write_wav_f32, write_wav_pcm16, RawRecording};
