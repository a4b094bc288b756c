//! Synthetic captioned skeletons for desk-scale training and evaluation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strokerig_core::align::synthetic::biped_posed;
use strokerig_core::datakit::DatasetRecord;
use strokerig_core::{Category, SkeletonGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Biped,
    Quadruped,
    Tree,
    Bird,
}

pub const KINDS: [Kind; 4] = [Kind::Biped, Kind::Quadruped, Kind::Tree, Kind::Bird];

struct Builder {
    joints: Vec<[f64; 3]>,
    edges: Vec<(usize, usize)>,
}

impl Builder {
    fn new(root: [f64; 3]) -> Self {
        Self { joints: vec![root], edges: vec![] }
    }

    fn add(&mut self, parent: usize, p: [f64; 3]) -> usize {
        self.joints.push(p);
        let i = self.joints.len() - 1;
        self.edges.push((parent, i));
        i
    }

    fn finish(self, category: Category) -> SkeletonGraph {
        SkeletonGraph::new(self.joints, self.edges)
            .expect("generated skeleton is well formed")
            .with_category(category)
            .with_root(0)
    }
}

fn quadruped<R: Rng + ?Sized>(rng: &mut R) -> SkeletonGraph {
    let body = rng.random_range(0.5..0.8);
    let leg = rng.random_range(0.25..0.45);
    let width = rng.random_range(0.1..0.16);
    let neck_up = rng.random_range(0.1..0.35);
    let tail_droop = rng.random_range(-0.15..0.15);
    let mut b = Builder::new([0.0, leg, -body / 2.0]);
    let mid = b.add(0, [0.0, leg + 0.02, 0.0]);
    let chest = b.add(mid, [0.0, leg, body / 2.0]);
    let neck = b.add(chest, [0.0, leg + neck_up, body / 2.0 + 0.12]);
    b.add(neck, [0.0, leg + neck_up + 0.05, body / 2.0 + 0.28]);
    let t1 = b.add(0, [0.0, leg + 0.02 + tail_droop / 2.0, -body / 2.0 - 0.15]);
    b.add(t1, [0.0, leg + tail_droop, -body / 2.0 - 0.3]);
    for (anchor, z) in [(0, -body / 2.0), (chest, body / 2.0)] {
        for sx in [1.0, -1.0] {
            let hip = b.add(anchor, [sx * width, leg - 0.03, z]);
            let knee = b.add(hip, [sx * width, leg / 2.0, z + 0.03]);
            b.add(knee, [sx * width, 0.0, z]);
        }
    }
    b.finish(Category::Animal)
}

fn tree<R: Rng + ?Sized>(rng: &mut R) -> SkeletonGraph {
    let height = rng.random_range(1.0..1.6);
    let levels = rng.random_range(3..=5usize);
    let mut b = Builder::new([0.0, 0.0, 0.0]);
    let mut prev = 0;
    for l in 1..=levels {
        let y = height * l as f64 / levels as f64;
        let sway = rng.random_range(-0.05..0.05);
        let node = b.add(prev, [sway, y, 0.0]);
        if l >= 2 {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let len = rng.random_range(0.2..0.4) * (1.2 - l as f64 / levels as f64 * 0.5);
            let tip = [sway + len * angle.cos(), y + 0.15, len * angle.sin()];
            let mid = b.add(node, [(sway + tip[0]) / 2.0, y + 0.08, tip[2] / 2.0]);
            b.add(mid, tip);
        }
        prev = node;
    }
    b.finish(Category::Plant)
}

fn bird<R: Rng + ?Sized>(rng: &mut R) -> SkeletonGraph {
    let span = rng.random_range(0.5..0.9);
    let lift = rng.random_range(-0.1..0.3);
    let leg = rng.random_range(0.15..0.25);
    let mut b = Builder::new([0.0, leg, 0.0]);
    let chest = b.add(0, [0.0, leg + 0.05, 0.15]);
    let head = b.add(chest, [0.0, leg + 0.2, 0.25]);
    b.add(head, [0.0, leg + 0.18, 0.38]);
    b.add(0, [0.0, leg + 0.02, -0.3]);
    for sx in [1.0, -1.0] {
        let s = b.add(chest, [sx * 0.08, leg + 0.08, 0.12]);
        let e = b.add(s, [sx * span * 0.5, leg + 0.08 + lift * 0.5, 0.08]);
        b.add(e, [sx * span, leg + 0.08 + lift, 0.0]);
        let k = b.add(0, [sx * 0.06, leg / 2.0, 0.02]);
        b.add(k, [sx * 0.06, 0.0, 0.06]);
    }
    b.finish(Category::Animal)
}

/// One normalized skeleton of `kind` with its caption and tags.
pub fn record<R: Rng + ?Sized>(kind: Kind, rng: &mut R, id: usize) -> DatasetRecord {
    let (graph, caption, tags) = match kind {
        Kind::Biped => {
            let droop = rng.random_range(0.0..70.0);
            let g = biped_posed(rng, false, 0.0, droop);
            let pose = if droop < 15.0 { "T-pose" } else { "A-pose" };
            (g, "a humanoid character standing".to_string(), vec![pose.to_string(), "symmetry".to_string()])
        }
        Kind::Quadruped => (quadruped(rng), "a four-legged animal".into(), vec!["symmetry".into()]),
        Kind::Tree => (tree(rng), "a small tree".into(), vec![]),
        Kind::Bird => (bird(rng), "a bird with open wings".into(), vec!["symmetry".into()]),
    };
    let mut skeleton = graph.normalize().expect("non-empty");
    skeleton.root = None;
    DatasetRecord { skeleton, caption, tags, source_id: format!("toy-{id:05}") }
}

/// `n` records cycling through all kinds, seeded.
pub fn dataset(n: usize, seed: u64) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| record(KINDS[i % KINDS.len()], &mut rng, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use strokerig_core::validate::validate;

    #[test]
    fn records_are_valid_training_graphs() {
        for r in dataset(40, 3) {
            let report = validate(&r.skeleton);
            assert!(report.is_valid(), "{}: {:?}", r.source_id, report.codes());
            assert!(!r.caption.is_empty());
        }
    }

    #[test]
    fn dataset_is_seeded() {
        assert_eq!(dataset(8, 1), dataset(8, 1));
        assert_ne!(dataset(8, 1), dataset(8, 2));
    }
}
