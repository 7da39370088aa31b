//! Synthetic product photos: a flat-colored object on a plain studio
//! backdrop, shot a few times at slightly different positions and scales.
//! Good enough for the mock segmenter and captioner to behave like the real
//! thing on catalogue images.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::canonical::{derive_id, derive_seed};
use crate::model::{AssetRole, ImageAsset, ProductRecord};
use crate::raster::Raster;

const BACKDROP: [u8; 3] = [232, 230, 226];

/// `(title, category, brand, color name, rgb, shape)`
type Entry = (&'static str, &'static str, &'static str, &'static str, [u8; 3], Shape);

const CATALOGUE: [Entry; 6] = [
    ("Acme Vortex Chair", "chair", "Acme", "red", [200, 40, 40], Shape::Chair),
    ("Lumo Desk Lamp", "lamp", "Lumo", "blue", [50, 80, 200], Shape::Lamp),
    ("Terra Ceramic Vase", "vase", "Terra", "green", [50, 160, 60], Shape::Vase),
    ("Pike Trail Backpack", "backpack", "Pike", "orange", [230, 130, 30], Shape::Box),
    ("Orbit Smart Speaker", "speaker", "Orbit", "purple", [130, 60, 170], Shape::Vase),
    ("Halden Wool Cushion", "cushion", "Halden", "teal", [40, 150, 150], Shape::Box),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Chair,
    Lamp,
    Vase,
    Box,
}

impl Shape {
    /// Whether the unit-square point `(u, v)` lies on the object.
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Box => (0.1..0.9).contains(&u) && (0.15..0.95).contains(&v),
            Shape::Vase => {
                let half = 0.18 + 0.22 * (std::f64::consts::PI * v).sin();
                (u - 0.5).abs() < half && (0.05..0.97).contains(&v)
            }
            Shape::Lamp => {
                let shade = v < 0.35 && (u - 0.5).abs() < 0.12 + 0.5 * v;
                let stem = (0.35..0.9).contains(&v) && (u - 0.5).abs() < 0.05;
                let foot = v >= 0.9 && (u - 0.5).abs() < 0.3;
                shade || stem || foot
            }
            Shape::Chair => {
                let back = (0.15..0.3).contains(&u) && v < 0.6;
                let seat = (0.15..0.85).contains(&u) && (0.5..0.62).contains(&v);
                let legs = v >= 0.62 && ((0.15..0.22).contains(&u) || (0.78..0.85).contains(&u));
                back || seat || legs
            }
        }
    }
}

/// One photo of `shape` filling `scale` of the frame, offset by `(dx, dy)` pixels.
fn photograph(size: u32, shape: Shape, rgb: [u8; 3], scale: f64, dx: i32, dy: i32) -> Raster {
    let extent = size as f64 * scale;
    let origin = (size as f64 - extent) / 2.0;
    Raster::from_fn(size, size, |x, y| {
        let u = (x as f64 - origin - dx as f64) / extent;
        let v = (y as f64 - origin - dy as f64) / extent;
        if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) && shape.covers(u, v) {
            // A soft left-to-right shading so frames are not flat fills.
            let shade = (u * 24.0) as i32 - 12;
            rgb.map(|c| (c as i32 + shade).clamp(0, 255) as u8)
        } else {
            BACKDROP
        }
    })
}

#[derive(Debug, Clone)]
pub struct DemoProduct {
    pub product: ProductRecord,
    pub images: Vec<(ImageAsset, Raster)>,
}

/// `count` products cycling through a fixed catalogue, each with
/// `images_per_product` base photos of side `size`.
pub fn demo_products(count: usize, images_per_product: usize, size: u32, seed: u64) -> Vec<DemoProduct> {
    (0..count)
        .map(|i| {
            let (title, category, brand, color, rgb, shape) = CATALOGUE[i % CATALOGUE.len()];
            let round = i / CATALOGUE.len();
            let product_id = if round == 0 { format!("demo-{category}") } else { format!("demo-{category}-{round}") };
            let title = if round == 0 { title.to_string() } else { format!("{title} Mk{}", round + 1) };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &product_id));
            let images: Vec<(ImageAsset, Raster)> = (0..images_per_product)
                .map(|k| {
                    let scale = rng.gen_range(0.55..0.75);
                    let jitter = (size / 10) as i32;
                    let raster = photograph(size, shape, rgb, scale, rng.gen_range(-jitter..=jitter), rng.gen_range(-jitter..=jitter));
                    let id = derive_id("base", "demo", &product_id, "ingest", seed, k);
                    (ImageAsset::new(id, &product_id, AssetRole::Base, size, size), raster)
                })
                .collect();
            let product = ProductRecord {
                product_id: product_id.clone(),
                title,
                category: category.to_string(),
                metadata: BTreeMap::from([("brand".to_string(), brand.to_string()), ("color".to_string(), color.to_string())]),
                base_asset_ids: images.iter().map(|(a, _)| a.asset_id.clone()).collect(),
            };
            DemoProduct { product, images }
        })
        .collect()
}
