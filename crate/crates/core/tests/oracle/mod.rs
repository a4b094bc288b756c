//! Brute-force chamfer references written independently of the library:
//! segment distances use the cross-product form and bone samples are built by
//! convex combination.

#![allow(dead_code)]

pub type P = [f64; 3];

fn sub(a: &P, b: &P) -> P {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &P, b: &P) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &P) -> f64 {
    dot(a, a).sqrt()
}

fn cross(a: &P, b: &P) -> P {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Distance to a segment: perpendicular distance when the foot falls inside,
/// otherwise the nearer endpoint.
pub fn seg_dist(p: &P, a: &P, b: &P) -> f64 {
    let ab = sub(b, a);
    let len = norm(&ab);
    let da = norm(&sub(p, a));
    let db = norm(&sub(p, b));
    if len == 0.0 {
        return da;
    }
    let along = dot(&sub(p, a), &ab);
    if along <= 0.0 || along >= len * len {
        return da.min(db);
    }
    norm(&cross(&sub(p, a), &ab)) / len
}

pub fn directed(from: &[P], to: &[P]) -> f64 {
    let mut total = 0.0;
    for p in from {
        let mut best = f64::INFINITY;
        for q in to {
            let d = norm(&sub(p, q));
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    total / from.len() as f64
}

pub fn j2j(a: &[P], b: &[P]) -> f64 {
    (directed(a, b) + directed(b, a)) / 2.0
}

fn directed_bones(from: &[P], bones: &[(P, P)]) -> f64 {
    let mut total = 0.0;
    for p in from {
        let mut best = f64::INFINITY;
        for (a, b) in bones {
            best = best.min(seg_dist(p, a, b));
        }
        total += best;
    }
    total / from.len() as f64
}

pub fn j2b(ja: &[P], ba: &[(P, P)], jb: &[P], bb: &[(P, P)]) -> f64 {
    (directed_bones(ja, bb) + directed_bones(jb, ba)) / 2.0
}

pub fn samples(bones: &[(P, P)], per_bone: usize) -> Vec<P> {
    let mut out = Vec::new();
    for (a, b) in bones {
        for i in 0..per_bone {
            let t = i as f64 / (per_bone - 1) as f64;
            let s = 1.0 - t;
            out.push([s * a[0] + t * b[0], s * a[1] + t * b[1], s * a[2] + t * b[2]]);
        }
    }
    out
}

pub fn b2b(ba: &[(P, P)], bb: &[(P, P)], per_bone: usize) -> f64 {
    j2j(&samples(ba, per_bone), &samples(bb, per_bone))
}
