use proptest::prelude::*;
use seglora::losses::{
    bce_loss, composite_loss, focal_tversky_loss, soft_dice_loss, CompositeWeights, TverskyParams, BCE_CLAMP, EPS,
};
use seglora::{Result, Tape, Var};

fn ref_bce(p: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let q = p[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        s += t[i] * q.ln() + (1.0 - t[i]) * (1.0 - q).ln();
    }
    -s / p.len() as f64
}

fn ref_dice(p: &[f64], t: &[f64]) -> f64 {
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        inter += p[i] * t[i];
        sp += p[i];
        st += t[i];
    }
    1.0 - (2.0 * inter + EPS) / (sp + st + EPS)
}

fn ref_ftl(p: &[f64], t: &[f64], k: &TverskyParams) -> f64 {
    let (mut tp, mut fneg, mut fpos) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        tp += p[i] * t[i];
        fneg += (1.0 - p[i]) * t[i];
        fpos += p[i] * (1.0 - t[i]);
    }
    let ti = (tp + EPS) / (tp + k.alpha * fneg + k.beta * fpos + EPS);
    (1.0 - ti).max(0.0).powf(k.gamma)
}

fn eval(p: &[f64], t: &[f64], f: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let pv = tape.constant(&[p.len()], p.to_vec()).unwrap();
    let tv = tape.constant(&[t.len()], t.to_vec()).unwrap();
    let out = f(&mut tape, pv, tv).unwrap();
    tape.value(out)[0]
}

fn all(p: &[f64], t: &[f64]) -> (f64, f64, f64) {
    let k = TverskyParams::default();
    (
        eval(p, t, |tp, a, b| bce_loss(tp, a, b)),
        eval(p, t, |tp, a, b| soft_dice_loss(tp, a, b)),
        eval(p, t, |tp, a, b| focal_tversky_loss(tp, a, b, &k)),
    )
}

#[test]
fn worked_examples() {
    let (bce, _, _) = all(&[0.5; 4], &[1.0, 0.0, 1.0, 1.0]);
    assert_eq!(bce, std::f64::consts::LN_2);
    let (bce, _, _) = all(&[0.9, 0.1], &[1.0, 0.0]);
    assert!((bce - 0.105_360_515_657_826_3).abs() < 1e-12);

    let (_, dice, _) = all(&[0.5; 4], &[1.0, 1.0, 0.0, 0.0]);
    assert_eq!(dice, 1.0 - (2.0 + EPS) / (4.0 + EPS));
    assert!((dice - 0.5).abs() < 1e-5);

    let (_, _, ftl) = all(&[0.5, 0.5], &[1.0, 0.0]);
    let want = (1.0f64 - (0.5 + EPS) / (0.5 + 0.35 + 0.15 + EPS)).powf(4.0 / 3.0);
    assert!((ftl - want).abs() < 1e-15);
    assert!((ftl - 0.39685).abs() < 1e-5);
}

#[test]
fn perfect_and_worst_predictions() {
    let t = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let (bce, dice, ftl) = all(&t, &t);
    assert!(bce <= -(1.0f64 - 1e-7).ln() + 1e-15);
    assert!(dice < 1e-5);
    assert!(ftl < 1e-4);

    let miss: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
    let (_, dice, ftl) = all(&miss, &t);
    assert!(dice > 0.999_99);
    assert!(ftl > 0.999_9);
}

#[test]
fn empty_target_and_empty_prediction_give_zero_dice_loss() {
    let (_, dice, ftl) = all(&[0.0; 9], &[0.0; 9]);
    assert_eq!(dice, 0.0);
    assert_eq!(ftl, 0.0);
}

#[test]
fn composite_degenerate_weights_select_one_term() {
    let p = [0.2, 0.7, 0.9, 0.4];
    let t = [0.0, 1.0, 1.0, 0.0];
    let (bce, dice, ftl) = all(&p, &t);
    let k = TverskyParams::default();
    let comp = |w: CompositeWeights| {
        eval(&p, &t, |tp, a, b| composite_loss(tp, a, b, &w, &k).map(|(v, _)| v))
    };
    assert_eq!(comp(CompositeWeights::new(1.0, 0.0, 0.0)), bce);
    assert_eq!(comp(CompositeWeights::new(0.0, 0.0, 1.0)), ftl);
    assert_eq!(comp(CompositeWeights::new(0.0, 1.0, 0.0)), dice);
    assert!((comp(CompositeWeights::default()) - (bce + dice + ftl)).abs() < 1e-15);
}

#[test]
fn invalid_tversky_weights_are_rejected() {
    let bad = TverskyParams {
        alpha: 0.6,
        beta: 0.6,
        gamma: 1.0,
    };
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(&[2], vec![0.5, 0.5]).unwrap();
    let t = tape.constant(&[2], vec![1.0, 0.0]).unwrap();
    assert!(focal_tversky_loss(&mut tape, p, t, &bad).is_err());
    let short = tape.constant(&[3], vec![1.0, 0.0, 1.0]).unwrap();
    assert!(bce_loss(&mut tape, p, short).is_err());
}

fn case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let probs = prop::collection::vec(0.0f64..=1.0, 64);
    let target = prop_oneof![
        1 => Just(vec![0.0; 64]),
        4 => prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }), 64),
    ];
    (probs, target)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn losses_match_scalar_loops((p, t) in case()) {
        let (bce, dice, ftl) = all(&p, &t);
        prop_assert!((bce - ref_bce(&p, &t)).abs() < 1e-10);
        prop_assert!((dice - ref_dice(&p, &t)).abs() < 1e-10);
        prop_assert!((ftl - ref_ftl(&p, &t, &TverskyParams::default())).abs() < 1e-10);
    }

    #[test]
    fn losses_stay_in_their_bounds((p, t) in case()) {
        let (bce, dice, ftl) = all(&p, &t);
        prop_assert!((0.0..=-BCE_CLAMP.ln() + 1e-12).contains(&bce));
        prop_assert!((0.0..=1.0).contains(&dice));
        prop_assert!((0.0..=1.0).contains(&ftl));
    }
}
