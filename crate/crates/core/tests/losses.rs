use fogseg::losses::*;
use fogseg::tensor::{Graph, Tensor, Var};
use proptest::prelude::*;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn scalar(f: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).item()
}

/// `-ln softmax(z)[y]`, computed directly in f64.
fn ce_oracle(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[y]
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[test]
fn l1_examples() {
    let v = scalar(|g| {
        let a = g.constant(t(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[4], vec![1.0; 4]));
        l1_similarity(g, a, b).unwrap()
    });
    assert!((v - 1.5).abs() < 1e-12);
    let v = scalar(|g| {
        let a = g.constant(t(&[1, 3, 2, 2], vec![0.2; 12]));
        let b = g.constant(t(&[1, 3, 2, 2], vec![0.5; 12]));
        l1_pixel_loss(g, a, b).unwrap()
    });
    assert!((v - 0.3).abs() < 1e-12);
}

#[test]
fn pyramid_losses_sum_stage_terms() {
    let v = scalar(|g| {
        let d = vec![g.constant(t(&[2], vec![0.5, 0.5])), g.constant(t(&[4], vec![0.25; 4]))];
        let c = vec![g.constant(t(&[2], vec![0.0; 2])), g.constant(t(&[4], vec![0.0; 4]))];
        dct_loss(g, &d, &c).unwrap()
    });
    assert!((v - 0.75).abs() < 1e-12);
    let v = scalar(|g| {
        let d = vec![g.constant(t(&[3], vec![0.6; 3]))];
        let c = vec![g.constant(t(&[3], vec![0.0; 3]))];
        let s = g.constant(t(&[1, 2, 1, 1], vec![0.1, -0.1]));
        let z = g.constant(t(&[1, 2, 1, 1], vec![0.0, 0.0]));
        sed_loss(g, &d, &c, s, z).unwrap()
    });
    assert!((v - 0.7).abs() < 1e-12);
    let mut g: Graph<f64> = Graph::new();
    let a = vec![g.constant(t(&[2], vec![0.0; 2]))];
    let b = vec![g.constant(t(&[3], vec![0.0; 3]))];
    assert!(matches!(dct_loss(&mut g, &a, &b), Err(fogseg::Error::Dimension(_))));
    assert!(matches!(dct_loss(&mut g, &a, &[]), Err(fogseg::Error::Dimension(_))));
}

#[test]
fn cross_entropy_examples() {
    let labels = Labels::new(1, 2, 2, vec![0, 1, 2, 3]).unwrap();
    let v = scalar(|g| {
        let z = g.constant(t(&[1, 4, 2, 2], vec![0.0; 16]));
        cross_entropy(g, z, &labels).unwrap()
    });
    assert!((v - 4f64.ln()).abs() < 1e-12);

    let mut z = vec![0.0; 16];
    for (px, &y) in labels.data.iter().enumerate() {
        z[y as usize * 4 + px] = 30.0;
    }
    let v = scalar(|g| {
        let zv = g.constant(t(&[1, 4, 2, 2], z));
        cross_entropy(g, zv, &labels).unwrap()
    });
    assert!(v < 1e-9);
}

#[test]
fn cross_entropy_ignores_masked_pixels() {
    let (k, h, w) = (3usize, 2usize, 4usize);
    let z: Vec<f64> = (0..k * h * w).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect();
    let y: Vec<u8> = vec![0, 1, 2, 0, IGNORE, IGNORE, IGNORE, IGNORE];
    let labels = Labels::new(1, h, w, y.clone()).unwrap();
    let got = scalar(|g| {
        let zv = g.constant(t(&[1, k, h, w], z.clone()));
        cross_entropy(g, zv, &labels).unwrap()
    });
    let kept: Vec<f64> = (0..h * w)
        .filter(|&p| y[p] != IGNORE)
        .map(|p| ce_oracle(&(0..k).map(|c| z[c * h * w + p]).collect::<Vec<_>>(), y[p] as usize))
        .collect();
    let expect = kept.iter().sum::<f64>() / kept.len() as f64;
    assert!((got - expect).abs() < 1e-12);
}

#[test]
fn kl_examples() {
    // Reference (1, 0) from saturated logits, target (0.5, 0.5).
    let v = scalar(|g| {
        let fog = g.constant(t(&[1, 2, 1, 1], vec![0.0, 0.0]));
        let clean = g.constant(t(&[1, 2, 1, 1], vec![50.0, -50.0]));
        kl_consistency(g, fog, clean, KlDirection::CleanReference).unwrap()
    });
    assert!((v - 2f64.ln()).abs() < 1e-9);
    let v = scalar(|g| {
        let a = g.constant(t(&[1, 3, 1, 2], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.5]));
        kl_consistency(g, a, a, KlDirection::default()).unwrap()
    });
    assert_eq!(v, 0.0);
}

#[test]
fn finetune_total_is_affine() {
    assert!((finetune_total(1.0, 2.0, 5.0, 1e-4).unwrap() - 3.0005).abs() < 1e-6);
    assert_eq!(finetune_total(1.0, 2.0, 5.0, 0.0).unwrap(), 3.0);
    assert!(finetune_total(1.0, 2.0, 5.0, -1.0).is_err());
}

/// Relative error of analytic vs central-difference gradients over every
/// input scalar; inputs are kept away from `|x|` kinks by the callers.
fn grad_check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let l = f(&mut g, &vs);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let l = f(&mut g, &vs);
    let grads = g.backward(l).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (i, v) in vs.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; inputs[i].data().len()]);
        for j in 0..inputs[i].data().len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (analytic[j] - numeric).abs() / numeric.abs().max(analytic[j].abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn spread(n: usize, offset: f64) -> Vec<f64> {
    (0..n).map(|i| ((i * 17 + 5) % 13) as f64 * 0.15 - 0.9 + offset).collect()
}

#[test]
fn gradients_match_finite_differences() {
    let a = t(&[1, 2, 2, 2], spread(8, 0.0));
    let b = t(&[1, 2, 2, 2], spread(8, 0.07));
    assert!(grad_check(vec![a.clone(), b.clone()], |g, v| l1_pixel_loss(g, v[0], v[1]).unwrap()) <= 1e-3);
    assert!(
        grad_check(vec![a.clone(), b.clone(), t(&[4], spread(4, 0.3)), t(&[4], spread(4, 0.0))], |g, v| {
            dct_loss(g, &[v[0], v[2]], &[v[1], v[3]]).unwrap()
        }) <= 1e-3
    );
    assert!(
        grad_check(vec![a.clone(), b.clone(), t(&[1, 3, 2, 2], spread(12, 0.0))], |g, v| {
            let c = g.constant(Tensor::new(vec![1, 3, 2, 2], spread(12, 0.11)).unwrap());
            sed_loss(g, &[v[0]], &[v[1]], v[2], c).unwrap()
        }) <= 1e-3
    );
    let labels = Labels::new(1, 2, 2, vec![0, 2, IGNORE, 1]).unwrap();
    assert!(
        grad_check(vec![t(&[1, 3, 2, 2], spread(12, 0.0))], |g, v| cross_entropy(g, v[0], &labels).unwrap())
            <= 1e-3
    );
    for dir in [KlDirection::CleanReference, KlDirection::FogReference] {
        assert!(
            grad_check(vec![t(&[1, 3, 2, 2], spread(12, 0.0)), t(&[1, 3, 2, 2], spread(12, 0.4))], |g, v| {
                kl_consistency(g, v[0], v[1], dir).unwrap()
            }) <= 1e-3
        );
    }
}

proptest! {
    #[test]
    fn losses_are_non_negative(z in prop::collection::vec(-5.0f64..5.0, 24), y in prop::collection::vec(0u8..3, 8)) {
        let (fog, clean) = (z[..12].to_vec(), z[12..].to_vec());
        let labels = Labels::new(1, 2, 2, y[..4].to_vec()).unwrap();
        let ce = scalar(|g| { let v = g.constant(t(&[1, 3, 2, 2], fog.clone())); cross_entropy(g, v, &labels).unwrap() });
        prop_assert!(ce >= 0.0);
        let kl = scalar(|g| {
            let a = g.constant(t(&[1, 3, 2, 2], fog.clone()));
            let b = g.constant(t(&[1, 3, 2, 2], clean.clone()));
            kl_consistency(g, a, b, KlDirection::CleanReference).unwrap()
        });
        prop_assert!(kl >= -1e-12);
        // Independent per-pixel KL(p_clean || p_fog).
        let hw = 4;
        let mut expect = 0.0;
        for p in 0..hw {
            let pc = softmax(&(0..3).map(|c| clean[c * hw + p]).collect::<Vec<_>>());
            let pf = softmax(&(0..3).map(|c| fog[c * hw + p]).collect::<Vec<_>>());
            expect += pc.iter().zip(&pf).map(|(a, b)| a * (a.max(1e-12).ln() - b.max(1e-12).ln())).sum::<f64>();
        }
        prop_assert!((kl - expect / hw as f64).abs() < 1e-9);
        let sed = scalar(|g| {
            let a = g.constant(t(&[12], fog.clone()));
            let b = g.constant(t(&[12], clean.clone()));
            sed_loss(g, &[a], &[b], a, b).unwrap()
        });
        prop_assert!(sed >= 0.0);
    }
}
