//! Deterministic stand-in for the frozen vision encoder.
//!
//! Features are uniform in `[-1, 1)`, drawn from a ChaCha stream selected by
//! the image key and seeded by the caller's seed. Images whose id carries a
//! [`Descriptor`] additionally expose that descriptor in the first two
//! coordinates of every patch, so a probe can read it back.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::interleave::{ImageId, InterleavedSequence};
use crate::tensor::Matrix;

const DESCRIPTOR_TAG: u64 = 1 << 63;

/// Procedural image content: indices into a shape and a color palette.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Descriptor {
    pub shape: u8,
    pub color: u8,
}

impl Descriptor {
    /// An id that embeds this descriptor; `nonce` keeps distinct images apart.
    pub fn image_id(&self, nonce: u64) -> ImageId {
        ImageId(DESCRIPTOR_TAG | ((nonce & 0x7fff_ffff_ffff) << 16) | ((self.color as u64) << 8) | self.shape as u64)
    }

    pub fn decode(id: ImageId) -> Option<Descriptor> {
        (id.0 & DESCRIPTOR_TAG != 0).then_some(Descriptor {
            shape: (id.0 & 0xff) as u8,
            color: ((id.0 >> 8) & 0xff) as u8,
        })
    }

    /// Reads a descriptor back from one patch's raw features.
    pub fn probe(patch: &[f64]) -> Option<Descriptor> {
        let read = |v: f64| ((0.0..=255.0).contains(&v) && v.fract() == 0.0).then_some(v as u8);
        Some(Descriptor {
            shape: read(*patch.first()?)?,
            color: read(*patch.get(1)?)?,
        })
    }
}

fn fill_rows(key: u64, descriptor: Option<Descriptor>, patches: usize, dim: usize, seed: u64, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    for v in out.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    if let Some(d) = descriptor {
        if dim >= 2 {
            for p in 0..patches {
                out[p * dim] = d.shape as f64;
                out[p * dim + 1] = d.color as f64;
            }
        }
    }
}

/// Raw features `[ids.len() · patches × dim]`, one block of `patches` rows per id.
pub fn encode_images_stub(ids: &[ImageId], patches: usize, dim: usize, seed: u64) -> Matrix {
    let mut m = Matrix::zeros(ids.len() * patches, dim);
    for (i, id) in ids.iter().enumerate() {
        let block = &mut m.data[i * patches * dim..(i + 1) * patches * dim];
        fill_rows(id.0, Descriptor::decode(*id), patches, dim, seed, block);
    }
    m
}

/// Raw features for every image slot of a sequence.
///
/// Crops and frames draw from their own stream; the descriptor (if any)
/// follows the source image into all of its slots.
pub fn features_for_sequence(seq: &InterleavedSequence, patches: usize, dim: usize, seed: u64) -> Matrix {
    let mut m = Matrix::zeros(seq.num_slots() * patches, dim);
    for (i, slot) in seq.slots.iter().enumerate() {
        let block = &mut m.data[i * patches * dim..(i + 1) * patches * dim];
        fill_rows(
            slot.feature_key(),
            Descriptor::decode(slot.image_id),
            patches,
            dim,
            seed,
            block,
        );
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_id_and_seed() {
        let ids = [ImageId(4), ImageId(9)];
        let a = encode_images_stub(&ids, 3, 5, 11);
        assert_eq!(a, encode_images_stub(&ids, 3, 5, 11));
        assert_ne!(a, encode_images_stub(&ids, 3, 5, 12));
        let single = encode_images_stub(&ids[1..], 3, 5, 11);
        assert_eq!(single.data, a.data[15..]);
    }

    #[test]
    fn descriptor_roundtrip() {
        let d = Descriptor { shape: 3, color: 5 };
        let id = d.image_id(12345);
        assert_eq!(Descriptor::decode(id), Some(d));
        assert_eq!(Descriptor::decode(ImageId(12345)), None);
        let f = encode_images_stub(&[id], 2, 4, 1);
        assert_eq!(Descriptor::probe(f.row(0)), Some(d));
        assert_eq!(Descriptor::probe(f.row(1)), Some(d));
    }
}
