use proptest::prelude::*;

use ssod::augment::{transform_box, Affine};
use ssod::detector::{features, Arch, Detection, ModelParams};
use ssod::eval::{average_precision, match_detections, MatchResult};
use ssod::geometry::{decode_delta, encode_delta, iou, nms, BBox, Scored};
use ssod::plg::{double_filter, foreground_score, score_filter, PlgConfig, PseudoLabel};
use ssod::rng::stream;
use ssod::synthdata::Image;
use ssod::teacher_student::ema_update;

const SIZE: f64 = 32.0;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..SIZE - 4.0, 0.0..SIZE - 4.0, 2.0..16.0, 2.0..16.0)
        .prop_map(|(x, y, w, h): (f64, f64, f64, f64)| BBox::new(x, y, (x + w).min(SIZE), (y + h).min(SIZE)).unwrap())
}

fn candidate() -> impl Strategy<Value = (BBox, usize, f64, f64)> {
    (bbox(), 1..=4usize, 0.25..1.0, 0.0..1.0)
}

fn detections(raw: &[(BBox, usize, f64, f64)]) -> Vec<Detection> {
    raw.iter()
        .enumerate()
        .map(|(i, &(b, c, f, split))| {
            let mut probs = vec![0.0; 5];
            probs[c] = f;
            let rest = 1.0 - f;
            let share = split * rest.min(f);
            probs[1 + c % 4] += share;
            probs[0] = rest - share;
            Detection { bbox: b, foreground_score: foreground_score(&probs), class_probs: probs, anchor: i }
        })
        .collect()
}

fn ids(labels: &[PseudoLabel], cands: &[Detection]) -> Vec<usize> {
    labels.iter().map(|l| cands.iter().position(|d| d.bbox == l.bbox && d.foreground_score == l.score).unwrap()).collect()
}

fn is_subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|x| b.contains(x))
}

fn teacher_and_features() -> (ModelParams, ssod::detector::Features) {
    let mut rng = stream(&[11]);
    let teacher = ModelParams::init(Arch::new(4), &mut rng);
    let pixels = (0..32 * 32).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
    let img = Image { width: 32, height: 32, pixels };
    let feats = features(&teacher, &img).unwrap();
    (teacher, feats)
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delta_round_trip(t in bbox(), r in bbox()) {
        let d = encode_delta(&t, &r).unwrap();
        let back = decode_delta(&d, &r, None).unwrap();
        for (x, y) in back.coords().iter().zip(t.coords()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_keeps_a_nonoverlapping_subset(raw in prop::collection::vec(candidate(), 0..12), thr in 0.1..0.9f64) {
        let dets = detections(&raw);
        let kept = nms(&dets, thr);
        prop_assert!(kept.len() <= dets.len());
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(dets.iter().any(|d| d.anchor == a.anchor));
            for b in &kept[i + 1..] {
                prop_assert!(a.score() >= b.score());
                if a.class_id() == b.class_id() {
                    prop_assert!(iou(&a.bbox, &b.bbox).unwrap() <= thr);
                }
            }
        }
        // The top candidate always survives.
        if let Some(top) = dets.iter().max_by(|a, b| a.score().total_cmp(&b.score())) {
            prop_assert_eq!(kept[0].score(), top.score());
        }
    }

    #[test]
    fn score_filter_is_monotone(raw in prop::collection::vec(candidate(), 0..10), a in 0.2..1.0f64, b in 0.2..1.0f64) {
        let dets = detections(&raw);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let loose = ids(&score_filter(&dets, lo), &dets);
        let strict = ids(&score_filter(&dets, hi), &dets);
        prop_assert!(is_subset(&strict, &loose));
        prop_assert!(score_filter(&dets, hi).iter().all(|l| l.score > hi));
    }

    #[test]
    fn affine_inverse_composes_to_identity(tx in -10.0..10.0f64, deg in -30.0..30.0f64, sh in -20.0..20.0f64, x in 0.0..SIZE, y in 0.0..SIZE) {
        let m = Affine::translation(tx, 0.5 * tx).after(&Affine::rotation_about(16.0, 16.0, deg)).after(&Affine::shear_about(16.0, sh));
        let (u, v) = m.inverse().unwrap().apply(m.apply(x, y).0, m.apply(x, y).1);
        prop_assert!((u - x).abs() < 1e-9 && (v - y).abs() < 1e-9);
    }

    #[test]
    fn flip_is_an_involution_on_boxes(b in bbox()) {
        let f = Affine::hflip(SIZE);
        let once = transform_box(&b, &f, SIZE, SIZE).unwrap().unwrap();
        prop_assert!((once.width() - b.width()).abs() < 1e-9);
        let twice = transform_box(&once, &f, SIZE, SIZE).unwrap().unwrap();
        for (x, y) in twice.coords().iter().zip(b.coords()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn ap_is_bounded_and_rank_invariant(
        imgs in prop::collection::vec((prop::collection::vec((0.0..1.0f64, bbox()), 0..6), prop::collection::vec(bbox(), 0..4)), 1..5),
    ) {
        let results: Vec<MatchResult> = imgs.iter().map(|(d, g)| match_detections(d, g, 0.3)).collect();
        let ap = average_precision(&results);
        let num_gt: usize = imgs.iter().map(|i| i.1.len()).sum();
        prop_assert_eq!(ap.is_none(), num_gt == 0);
        if let Some(ap) = ap {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
            // A strictly increasing remap of the scores leaves AP unchanged.
            let remapped: Vec<MatchResult> = imgs
                .iter()
                .map(|(d, g)| {
                    let d2: Vec<(f64, BBox)> = d.iter().map(|(s, b)| (s.powi(3) * 5.0 + 1.0, *b)).collect();
                    match_detections(&d2, g, 0.3)
                })
                .collect();
            prop_assert!((average_precision(&remapped).unwrap() - ap).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_detections_give_unit_ap(gts in prop::collection::vec(bbox(), 1..6)) {
        let dets: Vec<(f64, BBox)> = gts.iter().enumerate().map(|(i, b)| (1.0 - i as f64 * 0.01, *b)).collect();
        let r = match_detections(&dets, &gts, 0.3);
        prop_assert!(r.true_positives() >= 1);
        if r.true_positives() == gts.len() {
            prop_assert!((average_precision(&[r]).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_is_a_convex_combination(alpha in 0.0..=1.0f64, seed_t in 0u64..1000, seed_s in 0u64..1000) {
        let arch = Arch::new(4);
        let t = ModelParams::init(arch, &mut stream(&[seed_t]));
        let s = ModelParams::init(arch, &mut stream(&[seed_s, 1]));
        let e = ema_update(&t, &s, alpha).unwrap();
        for ((ev, tv), sv) in e.values.iter().zip(&t.values).zip(&s.values) {
            prop_assert!(*ev >= tv.min(*sv) - 1e-12 && *ev <= tv.max(*sv) + 1e-12);
        }
        prop_assert_eq!(&ema_update(&t, &s, 1.0).unwrap().values, &t.values);
        prop_assert_eq!(&ema_update(&t, &s, 0.0).unwrap().values, &s.values);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn double_filter_is_monotone_and_inside_the_score_set(
        raw in prop::collection::vec(candidate(), 0..6),
        t2 in (0.3..0.99f64, 0.3..0.99f64),
        d in (0.005..0.08f64, 0.005..0.08f64),
        theta in 0.2..1.0f64,
        seed in any::<u64>(),
    ) {
        let (teacher, feats) = teacher_and_features();
        let dets = detections(&raw);
        let (t2_lo, t2_hi) = if t2.0 <= t2.1 { (t2.0, t2.1) } else { (t2.1, t2.0) };
        let (d_hi, d_lo) = if d.0 >= d.1 { (d.0, d.1) } else { (d.1, d.0) };
        let loose = PlgConfig { strategy: "double".into(), theta2: t2_lo, delta: d_hi, n_jitter: 4, ..PlgConfig::default() };
        let strict = PlgConfig { theta2: t2_hi, delta: d_lo, ..loose.clone() };
        let la = double_filter(&dets, &teacher, &feats, &loose, &mut stream(&[seed]));
        let lb = double_filter(&dets, &teacher, &feats, &strict, &mut stream(&[seed]));
        let (ia, ib) = (ids(&la, &dets), ids(&lb, &dets));
        prop_assert!(is_subset(&ib, &ia));
        prop_assert!(la.iter().all(|l| l.score > t2_lo && l.variance.unwrap() <= d_hi));
        let cls = ids(&score_filter(&dets, theta.min(t2_lo)), &dets);
        prop_assert!(is_subset(&ia, &cls));
    }
}
