//! Audio I/O, the synthetic corpus generator and log-mel features.

mod corpus;
mod mel;
mod synth;
mod wav;

pub use corpus::{load_corpus, manifest_path, read_manifest, write_corpus, Manifest, ManifestEntry, MANIFEST_FILE};
pub use mel::{hz_to_mel, log_mel, mel_to_hz, LogMel, MelConfig, MelFilterbank, MelFrameSeq};
pub use synth::{synth_corpus, PhoneClass, SynthCorpusSpec, Utterance};
pub use wav::{read_wav, write_wav, WaveBuffer, DEFAULT_SAMPLE_RATE};
