#![allow(dead_code)]

use panther_core::data::{gen_dataset, vocabulary, Conversation, GridSpec};
use panther_core::model::{Panther, PantherConfig};
use panther_core::vision::{PatchGrid, PromptScheme, VitConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn micro_model(scheme: PromptScheme) -> Panther {
    let mut cfg = PantherConfig::micro();
    cfg.vit.scheme = scheme;
    Panther::new(cfg, vocabulary()).unwrap()
}

pub fn micro_grid() -> GridSpec {
    GridSpec {
        height: 8,
        width: 8,
        patch: 4,
        block: 4,
    }
}

pub fn micro_data(n: usize, k: usize, seed: u64) -> Vec<Conversation> {
    gen_dataset(n, (k, k), &micro_grid(), seed).unwrap()
}

pub fn random_image(cfg: &VitConfig, seed: u64) -> PatchGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_height * cfg.image_width * cfg.channels;
    let pixels = (0..n).map(|_| rng.random::<f32>()).collect();
    PatchGrid::new(cfg.image_height, cfg.image_width, cfg.channels, cfg.patch_size, pixels).unwrap()
}
