//! Convolutional network with global average pooling.

use super::{dot, generic_kernel, vpair, ArchConfig, ArchError, BuiltProgram};
use crate::engine::{EngineOptions, OutputKernel, SamplingSpec};
use crate::lang::{typecheck, Expr, Output, Program, Statement, VarType};
use crate::nonlin::{apply, cnst, NonlinRegistry, NonlinSpec, Prim, ScalarExpr};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

/// Explicit index-set geometry: `pos[l]` is the feature-map position set of
/// layer l (pos[0] = pixels), `ker[l-1]` the kernel offsets of layer l.
/// Strides and padding are whatever the supplied sets encode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CnnGeometry {
    pub pos: Vec<Vec<(i32, i32)>>,
    pub ker: Vec<Vec<(i32, i32)>>,
}

impl CnnGeometry {
    /// Square images with `side`^2 pixels, k x k kernels, same padding, L
    /// layers.
    pub fn square_same(side: i32, k: i32, layers: usize) -> CnnGeometry {
        let grid: Vec<(i32, i32)> =
            (0..side).flat_map(|i| (0..side).map(move |j| (i, j))).collect();
        let half = k / 2;
        let offsets: Vec<(i32, i32)> =
            (-half..=k - 1 - half).flat_map(|i| (-half..=k - 1 - half).map(move |j| (i, j))).collect();
        CnnGeometry {
            pos: vec![grid; layers + 1],
            ker: vec![offsets; layers],
        }
    }

    fn validate(&self, depth: usize) -> Result<(), ArchError> {
        if self.pos.len() != depth + 1 || self.ker.len() != depth {
            return Err(ArchError::BadPayload(format!(
                "geometry needs pos^0..pos^{depth} and ker^1..ker^{depth}"
            )));
        }
        for (l, p) in self.pos.iter().enumerate() {
            if p.is_empty() {
                return Err(ArchError::BadPayload(format!("empty position set at layer {l}")));
            }
        }
        // every position must receive at least one kernel tap
        for l in 1..=depth {
            for &i in &self.pos[l] {
                let reachable = self.ker[l - 1]
                    .iter()
                    .any(|&j| self.pos[l - 1].contains(&(i.0 + j.0, i.1 + j.1)));
                if !reachable {
                    return Err(ArchError::BadPayload(format!(
                        "position {i:?} of layer {l} is not reachable through ker^{l}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn payload<'a>(cfg: &'a ArchConfig) -> Result<(&'a [Vec<Vec<f64>>], &'a CnnGeometry), ArchError> {
    match &cfg.payload {
        super::InputPayload::Images { images, geometry } if !images.is_empty() => {
            geometry.validate(cfg.depth)?;
            let p0 = geometry.pos[0].len();
            for (a, img) in images.iter().enumerate() {
                if img.len() != p0 {
                    return Err(ArchError::BadPayload(format!(
                        "image {a} has {} pixels, geometry expects {p0}",
                        img.len()
                    )));
                }
            }
            let m = images[0][0].len();
            if m == 0 || images.iter().flatten().any(|v| v.len() != m) {
                return Err(ArchError::BadPayload("inconsistent channel counts".into()));
            }
            Ok((images, geometry))
        }
        _ => Err(ArchError::BadPayload("cnn expects an image payload".into())),
    }
}

pub(super) fn build(cfg: &ArchConfig) -> Result<BuiltProgram, ArchError> {
    let (images, geom) = payload(cfg)?;
    let b = images.len();
    let l_total = cfg.depth;
    let m = images[0][0].len() as f64;
    let registry = NonlinRegistry::builtin();
    let phi = registry
        .get(&cfg.nonlin)
        .filter(|s| s.arity == 1 && s.param_arity == 0)
        .ok_or_else(|| ArchError::BadConfig(format!("unknown unary nonlinearity `{}`", cfg.nonlin)))?
        .clone();

    let mut p = Program::new();
    p.nonlins.insert(phi.name.clone(), phi.clone());
    let mut sampling = SamplingSpec::default();
    let sw2 = cfg.sigma_w * cfg.sigma_w;

    let pix_index: HashMap<(i32, i32), usize> =
        geom.pos[0].iter().enumerate().map(|(k, &p)| (p, k)).collect();

    // layer-1 embeddings W1_j x^a_{i+j}, deduplicated by (kernel tap, image,
    // pixel); taps with different offsets use independent matrices, so their
    // embeddings are uncorrelated
    let mut emb: HashMap<(usize, usize, usize), String> = HashMap::new(); // (jk, a, pix) -> name
    for (jk, &j) in geom.ker[0].iter().enumerate() {
        for a in 0..b {
            for &i in &geom.pos[1] {
                let target = (i.0 + j.0, i.1 + j.1);
                if let Some(&pix) = pix_index.get(&target) {
                    emb.entry((jk, a, pix)).or_insert_with(|| {
                        let name = format!("W1k{jk}_x{}_p{pix}", a + 1);
                        p.statements.push(Statement {
                            target: name.clone(),
                            expr: Expr::Input,
                            ty: VarType::g("n"),
                        });
                        name
                    });
                }
            }
        }
    }
    let mut emb_keys: Vec<&(usize, usize, usize)> = emb.keys().collect();
    emb_keys.sort();
    for (ei, &&(jk, a, pix)) in emb_keys.iter().enumerate() {
        for &&(jk2, a2, pix2) in emb_keys.iter().take(ei + 1) {
            if jk != jk2 {
                continue;
            }
            sampling.set_sigma_in(
                emb[&(jk, a, pix)].clone(),
                emb[&(jk2, a2, pix2)].clone(),
                sw2 * dot(&images[a][pix], &images[a2][pix2]) / m,
            );
        }
    }

    // higher-layer kernels
    for l in 2..=l_total {
        for jk in 0..geom.ker[l - 1].len() {
            let name = format!("W{l}k{jk}");
            p.statements.push(Statement {
                target: name.clone(),
                expr: Expr::Input,
                ty: VarType::a("n", "n"),
            });
            sampling.avar_variance.insert(name, sw2);
        }
    }
    p.statements.push(Statement { target: "v".into(), expr: Expr::Input, ty: VarType::g("n") });

    for a in 0..b {
        let a1 = a + 1;
        // layer 1: sum embeddings over kernel taps
        for (pi, &i) in geom.pos[1].iter().enumerate() {
            let mut terms = Vec::new();
            for (jk, &j) in geom.ker[0].iter().enumerate() {
                if let Some(&pix) = pix_index.get(&(i.0 + j.0, i.1 + j.1)) {
                    terms.push((1.0, emb[&(jk, a, pix)].clone()));
                }
            }
            p.statements.push(Statement {
                target: format!("h1_{a1}_q{pi}"),
                expr: Expr::LinComb { terms },
                ty: VarType::g("n"),
            });
        }
        for l in 2..=l_total {
            // activations of the previous layer
            for (pi, _) in geom.pos[l - 1].iter().enumerate() {
                p.statements.push(Statement {
                    target: format!("x{}_{a1}_q{pi}", l - 1),
                    expr: Expr::Nonlin {
                        name: phi.name.clone(),
                        gvars: vec![format!("h{}_{a1}_q{pi}", l - 1)],
                        cvars: vec![],
                    },
                    ty: VarType::h("n"),
                });
            }
            let prev_index: HashMap<(i32, i32), usize> =
                geom.pos[l - 1].iter().enumerate().map(|(k, &p)| (p, k)).collect();
            for (pi, &i) in geom.pos[l].iter().enumerate() {
                let mut terms = Vec::new();
                for (jk, &j) in geom.ker[l - 1].iter().enumerate() {
                    if let Some(&pq) = prev_index.get(&(i.0 + j.0, i.1 + j.1)) {
                        let tap = format!("h{l}_{a1}_q{pi}_k{jk}");
                        p.statements.push(Statement {
                            target: tap.clone(),
                            expr: Expr::MatMul {
                                avar: format!("W{l}k{jk}"),
                                hvar: format!("x{}_{a1}_q{pq}", l - 1),
                            },
                            ty: VarType::g("n"),
                        });
                        terms.push((1.0, tap));
                    }
                }
                p.statements.push(Statement {
                    target: format!("h{l}_{a1}_q{pi}"),
                    expr: Expr::LinComb { terms },
                    ty: VarType::g("n"),
                });
            }
        }
        // nonlinearity + global average pooling over the last position set
        let pl = geom.pos[l_total].len();
        let gap_name = format!("gap{}_{}", pl, cfg.nonlin);
        p.nonlins.entry(gap_name.clone()).or_insert_with(|| {
            let sum = ScalarExpr::Sum(
                (0..pl).map(|k| apply(unary_prim(&phi), ScalarExpr::Arg(k))).collect(),
            );
            NonlinSpec::new(
                gap_name.clone(),
                pl,
                0,
                ScalarExpr::Prod(vec![cnst(1.0 / pl as f64), sum]),
            )
        });
        p.statements.push(Statement {
            target: format!("xbar_{a1}"),
            expr: Expr::Nonlin {
                name: gap_name,
                gvars: (0..pl).map(|pi| format!("h{l_total}_{a1}_q{pi}")).collect(),
                cvars: vec![],
            },
            ty: VarType::h("n"),
        });
    }
    let mut labels = Vec::new();
    for a in 0..b {
        p.outputs.push(Output { readout: "v".into(), hvar: format!("xbar_{}", a + 1) });
        labels.push(format!("img{}", a + 1));
    }
    let mut sigma_v = BTreeMap::new();
    sigma_v.insert("v".to_string(), cfg.sigma_v * cfg.sigma_v);
    sampling.sigma_v = sigma_v.clone();

    let typed = typecheck(&p)
        .map_err(|e| ArchError::BadConfig(format!("built cnn failed typecheck: {}", e[0])))?;
    Ok(BuiltProgram { typed, sampling, sigma_v, output_labels: labels })
}

fn unary_prim(spec: &NonlinSpec) -> Prim {
    match &spec.expr {
        ScalarExpr::Apply(p, _) => *p,
        _ => Prim::Id,
    }
}

/// Vectorized CNN kernel via the covariance 4-tensor recursion:
/// kernel-aligned sums of the V-transform, with a spatial average at the top.
pub fn cnn_kernel(cfg: &ArchConfig, opts: &EngineOptions) -> Result<OutputKernel, ArchError> {
    let (images, geom) = payload(cfg)?;
    if vpair(&cfg.nonlin, 1.0, 0.0, 1.0).is_none() {
        eprintln!(
            "note: nonlinearity `{}` has no closed-form V-transform; using the generic engine",
            cfg.nonlin
        );
        return generic_kernel(&super::build(cfg)?, opts);
    }
    let b = images.len();
    let m = images[0][0].len() as f64;
    let sw2 = cfg.sigma_w * cfg.sigma_w;
    let depth = cfg.depth;

    let pix_index: HashMap<(i32, i32), usize> =
        geom.pos[0].iter().enumerate().map(|(k, &p)| (p, k)).collect();

    // Sigma^1 over (image, position of layer 1)
    let p1 = geom.pos[1].len();
    let flat = |a: usize, pi: usize, np: usize| a * np + pi;
    let mut sigma = DMatrix::zeros(b * p1, b * p1);
    for a in 0..b {
        for (pi, &i) in geom.pos[1].iter().enumerate() {
            for a2 in 0..b {
                for (pj, &i2) in geom.pos[1].iter().enumerate() {
                    let mut acc = 0.0;
                    for &j in &geom.ker[0] {
                        if let (Some(&pa), Some(&pb)) = (
                            pix_index.get(&(i.0 + j.0, i.1 + j.1)),
                            pix_index.get(&(i2.0 + j.0, i2.1 + j.1)),
                        ) {
                            acc += dot(&images[a][pa], &images[a2][pb]);
                        }
                    }
                    sigma[(flat(a, pi, p1), flat(a2, pj, p1))] = sw2 * acc / m;
                }
            }
        }
    }

    let vphi_all = |s: &DMatrix<f64>| -> Result<DMatrix<f64>, ArchError> {
        let n = s.nrows();
        let mut out = DMatrix::zeros(n, n);
        for r in 0..n {
            for c in 0..=r {
                let v = vpair(&cfg.nonlin, s[(r, r)], s[(r, c)], s[(c, c)])
                    .ok_or_else(|| ArchError::Engine("V-transform failed".into()))?;
                out[(r, c)] = v;
                out[(c, r)] = v;
            }
        }
        Ok(out)
    };

    for l in 2..=depth {
        let v = vphi_all(&sigma)?;
        let (pprev, pcur) = (geom.pos[l - 1].len(), geom.pos[l].len());
        let prev_index: HashMap<(i32, i32), usize> =
            geom.pos[l - 1].iter().enumerate().map(|(k, &p)| (p, k)).collect();
        let mut next = DMatrix::zeros(b * pcur, b * pcur);
        for a in 0..b {
            for (pi, &i) in geom.pos[l].iter().enumerate() {
                for a2 in 0..b {
                    for (pj, &i2) in geom.pos[l].iter().enumerate() {
                        let mut acc = 0.0;
                        for &j in &geom.ker[l - 1] {
                            if let (Some(&qa), Some(&qb)) = (
                                prev_index.get(&(i.0 + j.0, i.1 + j.1)),
                                prev_index.get(&(i2.0 + j.0, i2.1 + j.1)),
                            ) {
                                acc += v[(flat(a, qa, pprev), flat(a2, qb, pprev))];
                            }
                        }
                        next[(flat(a, pi, pcur), flat(a2, pj, pcur))] = sw2 * acc;
                    }
                }
            }
        }
        sigma = next;
    }

    // spatial average of the top V-transform
    let v = vphi_all(&sigma)?;
    let pl = geom.pos[depth].len();
    let sv2 = cfg.sigma_v * cfg.sigma_v;
    let mut k = DMatrix::zeros(b, b);
    for a in 0..b {
        for a2 in 0..b {
            let mut acc = 0.0;
            for pi in 0..pl {
                for pj in 0..pl {
                    acc += v[(flat(a, pi, pl), flat(a2, pj, pl))];
                }
            }
            k[(a, a2)] = sv2 * acc / (pl * pl) as f64;
        }
    }
    let labels: Vec<String> = (1..=b).map(|a| format!("img{a}")).collect();
    Ok(OutputKernel { labels, readouts: vec!["v".into(); b], k })
}

/// Independent oracle: the same kernel by the per-entry scalar recursion
/// (memoized), following the layer recurrences entry by entry.
pub fn cnn_kernel_scalar(cfg: &ArchConfig) -> Result<DMatrix<f64>, ArchError> {
    let (images, geom) = payload(cfg)?;
    let b = images.len();
    let m = images[0][0].len() as f64;
    let sw2 = cfg.sigma_w * cfg.sigma_w;
    let pix_index: HashMap<(i32, i32), usize> =
        geom.pos[0].iter().enumerate().map(|(k, &p)| (p, k)).collect();

    type Key = (usize, usize, (i32, i32), (i32, i32));
    fn entry(
        l: usize,
        a: usize,
        a2: usize,
        i: (i32, i32),
        i2: (i32, i32),
        cfg: &ArchConfig,
        images: &[Vec<Vec<f64>>],
        geom: &CnnGeometry,
        pix_index: &HashMap<(i32, i32), usize>,
        memo: &mut HashMap<(usize, Key), f64>,
        m: f64,
        sw2: f64,
    ) -> f64 {
        if let Some(&v) = memo.get(&(l, (a, a2, i, i2))) {
            return v;
        }
        let v = if l == 1 {
            let mut acc = 0.0;
            for &j in &geom.ker[0] {
                if let (Some(&pa), Some(&pb)) = (
                    pix_index.get(&(i.0 + j.0, i.1 + j.1)),
                    pix_index.get(&(i2.0 + j.0, i2.1 + j.1)),
                ) {
                    acc += dot(&images[a][pa], &images[a2][pb]);
                }
            }
            sw2 * acc / m
        } else {
            let mut acc = 0.0;
            for &j in &geom.ker[l - 1] {
                let (q, q2) = ((i.0 + j.0, i.1 + j.1), (i2.0 + j.0, i2.1 + j.1));
                if geom.pos[l - 1].contains(&q) && geom.pos[l - 1].contains(&q2) {
                    let kxx =
                        entry(l - 1, a, a, q, q, cfg, images, geom, pix_index, memo, m, sw2);
                    let kyy =
                        entry(l - 1, a2, a2, q2, q2, cfg, images, geom, pix_index, memo, m, sw2);
                    let kxy =
                        entry(l - 1, a, a2, q, q2, cfg, images, geom, pix_index, memo, m, sw2);
                    acc += vpair(&cfg.nonlin, kxx, kxy, kyy).expect("closed form");
                }
            }
            sw2 * acc
        };
        memo.insert((l, (a, a2, i, i2)), v);
        v
    }

    let mut memo = HashMap::new();
    let depth = cfg.depth;
    let pl = &geom.pos[depth];
    let sv2 = cfg.sigma_v * cfg.sigma_v;
    let mut k = DMatrix::zeros(b, b);
    for a in 0..b {
        for a2 in 0..b {
            let mut acc = 0.0;
            for &i in pl {
                for &i2 in pl {
                    let kxx = entry(depth, a, a, i, i, cfg, images, geom, &pix_index, &mut memo, m, sw2);
                    let kyy =
                        entry(depth, a2, a2, i2, i2, cfg, images, geom, &pix_index, &mut memo, m, sw2);
                    let kxy =
                        entry(depth, a, a2, i, i2, cfg, images, geom, &pix_index, &mut memo, m, sw2);
                    acc += vpair(&cfg.nonlin, kxx, kxy, kyy).expect("closed form");
                }
            }
            k[(a, a2)] = sv2 * acc / (pl.len() * pl.len()) as f64;
        }
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::super::{ArchKind, InputPayload};
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_by_one(depth: usize, xs: Vec<Vec<f64>>) -> ArchConfig {
        let geometry = CnnGeometry {
            pos: vec![vec![(0, 0)]; depth + 1],
            ker: vec![vec![(0, 0)]; depth],
        };
        ArchConfig {
            kind: ArchKind::Cnn,
            depth,
            nonlin: "relu".into(),
            sigma_w: 1.1,
            sigma_u: 1.0,
            sigma_b: 0.0,
            sigma_v: 0.8,
            payload: InputPayload::Images {
                images: xs.into_iter().map(|x| vec![x]).collect(),
                geometry,
            },
        }
    }

    #[test]
    fn one_by_one_degenerates_to_mlp() {
        let xs = vec![vec![1.0, 0.3], vec![-0.5, 0.7]];
        let cnn = cnn_kernel(&one_by_one(3, xs.clone()), &EngineOptions::default()).unwrap();
        let mlp_cfg = ArchConfig {
            kind: ArchKind::Mlp,
            depth: 3,
            nonlin: "relu".into(),
            sigma_w: 1.1,
            sigma_u: 1.0,
            sigma_b: 0.0,
            sigma_v: 0.8,
            payload: InputPayload::Vectors(xs),
        };
        let mlp = super::super::mlp_kernel(&mlp_cfg, &EngineOptions::default()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(cnn.k[(i, j)], mlp.k[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn scalar_recursion_agrees_with_vectorized() {
        let geometry = CnnGeometry::square_same(3, 3, 2);
        let mut imgs = Vec::new();
        let mut x = 0.1;
        for _ in 0..2 {
            let img: Vec<Vec<f64>> = (0..9)
                .map(|_| {
                    x += 0.37;
                    vec![(x as f64).sin(), (2.0 * x as f64).cos()]
                })
                .collect();
            imgs.push(img);
        }
        let cfg = ArchConfig {
            kind: ArchKind::Cnn,
            depth: 2,
            nonlin: "relu".into(),
            sigma_w: 1.0,
            sigma_u: 1.0,
            sigma_b: 0.0,
            sigma_v: 1.0,
            payload: InputPayload::Images { images: imgs, geometry },
        };
        let fast = cnn_kernel(&cfg, &EngineOptions::default()).unwrap();
        let slow = cnn_kernel_scalar(&cfg).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(fast.k[(i, j)], slow[(i, j)], epsilon = 1e-12);
            }
        }
    }
}
