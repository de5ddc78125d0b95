use dadt::bev::{pool_object, pool_object_backward_into, GridSpec, ObjectFeature, Tensor3};
use dadt::losses::{
    attended_student, attended_teacher, context_similarity_loss, context_similarity_map,
    group_by_class, object_similarity_loss, total_loss, ClassGroup, LossConfig, MapSource,
};
use dadt::simlidar::{BoxLabel, ObjectClass};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> Tensor3 {
    let data = (0..h * w * c)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor3::from_vec(h, w, c, data).unwrap()
}

/// Labelled objects with random classes; some classes may be missing.
fn random_objects(
    n: usize,
    d: usize,
    rng: &mut impl Rng,
) -> (Vec<ObjectFeature>, Vec<ObjectFeature>) {
    let mut t = Vec::new();
    let mut s = Vec::new();
    for i in 0..n {
        let class = ObjectClass::ALL[rng.random_range(0..3)];
        let zt: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zs: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        t.push(ObjectFeature {
            values: zt,
            class,
            box_index: i,
        });
        s.push(ObjectFeature {
            values: zs,
            class,
            box_index: i,
        });
    }
    (t, s)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Object term straight from the per-object lists.
fn object_oracle(t: &[ObjectFeature], s: &[ObjectFeature]) -> f64 {
    let mut total = 0.0;
    for class in ObjectClass::ALL {
        let pairs: Vec<_> = t.iter().zip(s).filter(|(a, _)| a.class == class).collect();
        if pairs.is_empty() {
            continue;
        }
        let sum: f64 = pairs
            .iter()
            .map(|(a, b)| {
                a.values
                    .iter()
                    .zip(&b.values)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        total += sum / pairs.len() as f64;
    }
    total
}

/// Similarity map as the mean of per-object dot products.
fn map_oracle(z: &[Vec<f64>], f: &Tensor3, scale: f64) -> Vec<f64> {
    let mut m = vec![0.0; f.h * f.w];
    for (cell, v) in m.iter_mut().enumerate() {
        let mut acc = 0.0;
        for zi in z {
            acc += zi.iter().zip(f.cell(cell)).map(|(a, b)| a * b).sum::<f64>();
        }
        *v = scale * acc / z.len() as f64;
    }
    m
}

fn attended_oracle(f: &Tensor3, m: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.data.len());
    for (cell, w) in m.iter().enumerate() {
        out.extend(f.cell(cell).iter().map(|v| v * w));
    }
    out
}

fn context_oracle(
    ft: &Tensor3,
    zt: &[ClassGroup],
    fs: &Tensor3,
    zs: &[ClassGroup],
    cfg: &LossConfig,
) -> f64 {
    let scale = cfg.map_scale(fs.c);
    let mut total = 0.0;
    for (gt, gs) in zt.iter().zip(zs) {
        let keys = match cfg.teacher_map_source {
            MapSource::Student => fs,
            MapSource::Teacher => ft,
        };
        let a_t = attended_oracle(ft, &map_oracle(&gt.features, keys, scale));
        let a_s = attended_oracle(fs, &map_oracle(&gs.features, fs, scale));
        total += a_t
            .iter()
            .zip(&a_s)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / a_t.len() as f64;
    }
    total
}

fn configs() -> Vec<LossConfig> {
    let mut out = Vec::new();
    for source in [MapSource::Student, MapSource::Teacher] {
        for sqrt_d in [false, true] {
            out.push(LossConfig {
                teacher_map_source: source,
                scale_by_sqrt_d: sqrt_d,
                ..LossConfig::default()
            });
        }
    }
    out
}

#[test]
fn losses_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let (h, w, d) = (
            rng.random_range(1..8),
            rng.random_range(1..8),
            rng.random_range(1..9),
        );
        let (t, s) = random_objects(rng.random_range(1..9), d, &mut rng);
        let (gt, gs) = (group_by_class(&t), group_by_class(&s));
        let (ft, fs) = (
            random_tensor(h, w, d, &mut rng),
            random_tensor(h, w, d, &mut rng),
        );

        let lo = object_similarity_loss(&gt, &gs, 1e-12).unwrap();
        assert!(close(lo.value, object_oracle(&t, &s), 1e-12));

        for cfg in configs() {
            let scale = cfg.map_scale(d);
            for g in &gs {
                let map = context_similarity_map(&g.features, &fs, scale).unwrap();
                for (a, b) in map.values.iter().zip(map_oracle(&g.features, &fs, scale)) {
                    assert!(close(*a, b, 1e-12));
                }
            }
            for (class, a) in attended_student(&fs, &gs, scale).unwrap() {
                let g = gs.iter().find(|g| g.class == class).unwrap();
                let want = attended_oracle(&fs, &map_oracle(&g.features, &fs, scale));
                assert!(a.data.iter().zip(&want).all(|(x, y)| close(*x, *y, 1e-12)));
            }
            for (class, a) in
                attended_teacher(&ft, &gt, &fs, cfg.teacher_map_source, scale).unwrap()
            {
                let g = gt.iter().find(|g| g.class == class).unwrap();
                let keys = if cfg.teacher_map_source == MapSource::Student {
                    &fs
                } else {
                    &ft
                };
                let want = attended_oracle(&ft, &map_oracle(&g.features, keys, scale));
                assert!(a.data.iter().zip(&want).all(|(x, y)| close(*x, *y, 1e-12)));
            }
            let lc = context_similarity_loss(&ft, &gt, &fs, &gs, &cfg).unwrap();
            assert!(close(
                lc.value,
                context_oracle(&ft, &gt, &fs, &gs, &cfg),
                1e-12
            ));
            let per_class: f64 = lc.per_class.iter().map(|(_, v)| v).sum();
            assert!(close(per_class, lc.value, 1e-12));
        }
    }
}

#[test]
fn equality_gives_exact_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (t, _) = random_objects(6, 5, &mut rng);
        let g = group_by_class(&t);
        let f = random_tensor(4, 6, 5, &mut rng);
        assert_eq!(object_similarity_loss(&g, &g, 1e-12).unwrap().value, 0.0);
        for cfg in configs() {
            let lc = context_similarity_loss(&f, &g, &f, &g, &cfg).unwrap();
            assert_eq!(lc.value, 0.0);
            assert!(lc.grad_fs.data.iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn absent_classes_contribute_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = 4;
    let (mut t, mut s) = random_objects(5, d, &mut rng);
    for o in t.iter_mut().chain(s.iter_mut()) {
        o.class = if o.box_index % 2 == 0 {
            ObjectClass::Vehicle
        } else {
            ObjectClass::Cyclist
        };
    }
    let (gt, gs) = (group_by_class(&t), group_by_class(&s));
    assert_eq!(
        gs.iter().map(|g| g.class).collect::<Vec<_>>(),
        [ObjectClass::Vehicle, ObjectClass::Cyclist]
    );
    let (ft, fs) = (
        random_tensor(3, 3, d, &mut rng),
        random_tensor(3, 3, d, &mut rng),
    );
    let cfg = LossConfig::default();
    let lo = object_similarity_loss(&gt, &gs, 1e-12).unwrap();
    let lc = context_similarity_loss(&ft, &gt, &fs, &gs, &cfg).unwrap();
    // Sum of single-class losses equals the joint loss.
    let mut lo_sum = 0.0;
    let mut lc_sum = 0.0;
    for k in 0..gt.len() {
        lo_sum += object_similarity_loss(&gt[k..k + 1], &gs[k..k + 1], 1e-12)
            .unwrap()
            .value;
        lc_sum += context_similarity_loss(&ft, &gt[k..k + 1], &fs, &gs[k..k + 1], &cfg)
            .unwrap()
            .value;
    }
    assert!(close(lo.value, lo_sum, 1e-14) && close(lc.value, lc_sum, 1e-14));
    assert!(lo
        .per_class
        .iter()
        .all(|(c, _)| *c != ObjectClass::Pedestrian));
    let b = total_loss(0.3, lo.value, lc.value, &cfg).with_per_class(&lo.per_class, &lc.per_class);
    assert_eq!(b.l_o_per_class[ObjectClass::Pedestrian.id()], 0.0);
    assert_eq!(b.l_c_per_class[ObjectClass::Pedestrian.id()], 0.0);
    // No objects at all: nothing to compare, both terms vanish.
    assert_eq!(object_similarity_loss(&[], &[], 1e-12).unwrap().value, 0.0);
    assert_eq!(
        context_similarity_loss(&ft, &[], &fs, &[], &cfg)
            .unwrap()
            .value,
        0.0
    );
}

/// Full chain from student features: z_S is pooled from F_S, so F_S enters
/// through the attended features, the map and the pooled queries.
#[test]
fn context_gradient_through_pooling_matches_finite_differences() {
    let spec = GridSpec {
        x_min: 0.0,
        x_max: 6.0,
        y_min: -3.0,
        y_max: 3.0,
        cell: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = 4;
    let boxes = [
        BoxLabel::new(ObjectClass::Vehicle, [2.2, 0.4, -1.0], [3.0, 1.6, 1.5], 0.3).unwrap(),
        BoxLabel::new(
            ObjectClass::Vehicle,
            [4.6, -1.7, -1.0],
            [2.5, 1.4, 1.5],
            -1.1,
        )
        .unwrap(),
        BoxLabel::new(
            ObjectClass::Cyclist,
            [1.1, -2.2, -1.0],
            [1.8, 0.8, 1.7],
            2.0,
        )
        .unwrap(),
    ];
    let ft = random_tensor(spec.h(), spec.w(), d, &mut rng);
    let pool = |f: &Tensor3| -> Vec<ClassGroup> {
        let feats: Vec<ObjectFeature> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| ObjectFeature {
                values: pool_object(f, b, &spec).unwrap(),
                class: b.class,
                box_index: i,
            })
            .collect();
        group_by_class(&feats)
    };
    let zt = pool(&ft);
    for cfg in configs() {
        let fs = random_tensor(spec.h(), spec.w(), d, &mut rng);
        let lc = context_similarity_loss(&ft, &zt, &fs, &pool(&fs), &cfg).unwrap();
        let mut grad = lc.grad_fs.clone();
        // Route dL/dz_S back through pooling, boxes grouped like the features.
        for g in &lc.grad_zs {
            let members: Vec<&BoxLabel> = boxes.iter().filter(|b| b.class == g.class).collect();
            for (b, gz) in members.iter().zip(&g.features) {
                pool_object_backward_into(&mut grad, gz, b, &spec).unwrap();
            }
        }
        let eps = 1e-6;
        for k in 0..fs.data.len() {
            let mut p = fs.clone();
            p.data[k] += eps;
            let plus = context_similarity_loss(&ft, &zt, &p, &pool(&p), &cfg)
                .unwrap()
                .value;
            p.data[k] -= 2.0 * eps;
            let minus = context_similarity_loss(&ft, &zt, &p, &pool(&p), &cfg)
                .unwrap()
                .value;
            let num = (plus - minus) / (2.0 * eps);
            assert!(
                (num - grad.data[k]).abs() < 1e-7,
                "{cfg:?} coord {k}: {num} vs {}",
                grad.data[k]
            );
        }
    }
}

#[test]
fn object_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (t, s) = random_objects(7, 5, &mut rng);
    let (gt, gs) = (group_by_class(&t), group_by_class(&s));
    let lo = object_similarity_loss(&gt, &gs, 1e-12).unwrap();
    let eps = 1e-6;
    for (ci, g) in gs.iter().enumerate() {
        for (oi, z) in g.features.iter().enumerate() {
            for k in 0..z.len() {
                let mut p = gs.clone();
                p[ci].features[oi][k] += eps;
                let plus = object_similarity_loss(&gt, &p, 1e-12).unwrap().value;
                p[ci].features[oi][k] -= 2.0 * eps;
                let minus = object_similarity_loss(&gt, &p, 1e-12).unwrap().value;
                let num = (plus - minus) / (2.0 * eps);
                assert!((num - lo.grads[ci].features[oi][k]).abs() < 1e-8);
            }
        }
    }
}

type Pair = (usize, Vec<f64>, Vec<f64>);

fn objects_strategy() -> impl Strategy<Value = Vec<Pair>> {
    prop::collection::vec(
        (
            0usize..3,
            prop::collection::vec(-5.0f64..5.0, 3),
            prop::collection::vec(-5.0f64..5.0, 3),
        ),
        1..10,
    )
}

fn split(objs: &[Pair]) -> (Vec<ObjectFeature>, Vec<ObjectFeature>) {
    let mk = |pick: fn(&Pair) -> &Vec<f64>| {
        objs.iter()
            .enumerate()
            .map(|(i, o)| ObjectFeature {
                values: pick(o).clone(),
                class: ObjectClass::ALL[o.0],
                box_index: i,
            })
            .collect::<Vec<_>>()
    };
    (mk(|o| &o.1), mk(|o| &o.2))
}

proptest! {
    #[test]
    fn object_loss_is_permutation_invariant(objs in objects_strategy(), seed in any::<u64>()) {
        let (t, s) = split(&objs);
        let base = object_similarity_loss(&group_by_class(&t), &group_by_class(&s), 1e-12).unwrap().value;
        let mut order: Vec<usize> = (0..objs.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pt: Vec<_> = order.iter().map(|&i| t[i].clone()).collect();
        let ps: Vec<_> = order.iter().map(|&i| s[i].clone()).collect();
        let permuted = object_similarity_loss(&group_by_class(&pt), &group_by_class(&ps), 1e-12).unwrap().value;
        prop_assert!(close(base, permuted, 1e-12));
    }

    #[test]
    fn object_loss_is_positively_homogeneous(objs in objects_strategy(), alpha in 0.0f64..10.0) {
        let (t, s) = split(&objs);
        let scale = |v: &[ObjectFeature]| -> Vec<ObjectFeature> {
            v.iter().map(|o| ObjectFeature { values: o.values.iter().map(|x| alpha * x).collect(), ..o.clone() }).collect()
        };
        let base = object_similarity_loss(&group_by_class(&t), &group_by_class(&s), 1e-12).unwrap().value;
        let scaled = object_similarity_loss(&group_by_class(&scale(&t)), &group_by_class(&scale(&s)), 1e-12).unwrap().value;
        prop_assert!(close(scaled, alpha * base, 1e-12));
    }

    #[test]
    fn losses_are_non_negative_and_zero_on_self(objs in objects_strategy()) {
        let (t, s) = split(&objs);
        let (gt, gs) = (group_by_class(&t), group_by_class(&s));
        prop_assert!(object_similarity_loss(&gt, &gs, 1e-12).unwrap().value >= 0.0);
        prop_assert_eq!(object_similarity_loss(&gs, &gs, 1e-12).unwrap().value, 0.0);
        let f = Tensor3::filled(2, 3, &[0.5, -1.0, 2.0]);
        let lc = context_similarity_loss(&f, &gt, &f, &gs, &LossConfig::default()).unwrap();
        prop_assert!(lc.value >= 0.0);
        prop_assert_eq!(context_similarity_loss(&f, &gs, &f, &gs, &LossConfig::default()).unwrap().value, 0.0);
    }
}
