//! Procedural shape scenes with templated captions.

mod corpus;
mod dump;
mod scene;
mod vocab;

pub use corpus::{epoch_order, generate_pairs, make_batch, stream_rng, PairBatch, PairRecord, Stream, RNG_ALGORITHM};
pub use dump::dump_pairs;
pub use scene::{render_scene, Background, Color, Position, SceneSpec, Shape, Size, SCENE_COUNT};
pub use vocab::{caption, class_prompt, Vocab, EOT, EOT_ID, PAD, PAD_ID, TEMPLATES};
