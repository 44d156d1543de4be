use seqdistill::autodiff::{hvp_data, hvp_param, value_and_grad, value_and_grads};
use seqdistill::models::{Arch, ModelConfig, SeqModel, SoftNll};
use seqdistill::oracle::central_differences;
use seqdistill::par::Parallelism;
use seqdistill::tensor::{relative_error, ParamVector, Tensor};
use seqdistill::toy::{random_params, random_soft_data};

fn setup(arch: Arch, seed: u64) -> (SeqModel, ParamVector, Tensor) {
    let m = SeqModel::new(ModelConfig::new(arch, 5, 3, 6).with_seed(seed)).unwrap();
    let mut w = m.init_params();
    w.axpy(1.0, &random_params(&w, 0.4, seed + 1));
    let x = random_soft_data(3, 5, 5, 1.0, seed + 2);
    (m, w, x)
}

const ALL: [Arch; 3] = [Arch::EmbedSoftmax, Arch::CausalAttention1L, Arch::RecurrentGate];

#[test]
fn parameter_gradient_matches_finite_differences() {
    for (i, arch) in ALL.into_iter().enumerate() {
        let (m, w, x) = setup(arch, 10 + i as u64);
        let loss = SoftNll::new(&m);
        let rows = [0usize, 1, 2];
        let (_, g) = value_and_grad(&loss, &w, &x, &rows[..]).unwrap();
        let fd = central_differences(
            |p| {
                let wp = ParamVector::unflatten(w.layout().clone(), p.to_vec())?;
                value_and_grad(&loss, &wp, &x, &rows[..]).map(|r| r.0)
            },
            w.as_slice(),
            1e-5,
            Parallelism::Rayon,
        )
        .unwrap();
        let e = relative_error(g.as_slice(), &fd, 1e-12);
        assert!(e <= 1e-6, "{arch:?}: {e:.3e}");
    }
}

#[test]
fn hvp_param_matches_gradient_differences() {
    for (i, arch) in ALL.into_iter().enumerate() {
        let (m, w, x) = setup(arch, 20 + i as u64);
        let loss = SoftNll::new(&m);
        let rows = [0usize, 2];
        let v = random_params(&w, 1.0, 99);
        let hv = hvp_param(&loss, &w, &x, &rows[..], &v).unwrap();
        let h = 1e-4;
        let mut wp = w.clone();
        wp.axpy(h, &v);
        let mut wm = w.clone();
        wm.axpy(-h, &v);
        let gp = value_and_grad(&loss, &wp, &x, &rows[..]).unwrap().1;
        let gm = value_and_grad(&loss, &wm, &x, &rows[..]).unwrap().1;
        let fd: Vec<f64> = gp.as_slice().iter().zip(gm.as_slice()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let e = relative_error(hv.as_slice(), &fd, 1e-12);
        assert!(e <= 1e-5, "{arch:?}: {e:.3e}");
    }
}

#[test]
fn hvp_data_matches_gradient_differences() {
    for (i, arch) in ALL.into_iter().enumerate() {
        let (m, w, x) = setup(arch, 30 + i as u64);
        let loss = SoftNll::new(&m);
        let rows = [0usize, 1, 2];
        let v = random_params(&w, 1.0, 7);
        let hx = hvp_data(&loss, &w, &x, &rows[..], &v).unwrap();
        let fd = central_differences(
            |d| {
                let xd = Tensor::new(x.shape().to_vec(), d.to_vec())?;
                let g = value_and_grad(&loss, &w, &xd, &rows[..])?.1;
                Ok(g.dot(&v))
            },
            x.data(),
            1e-5,
            Parallelism::Rayon,
        )
        .unwrap();
        let e = relative_error(hx.data(), &fd, 1e-12);
        assert!(e <= 1e-5, "{arch:?}: {e:.3e}");
    }
}

#[test]
fn data_gradient_matches_finite_differences() {
    let (m, w, x) = setup(Arch::CausalAttention1L, 41);
    let loss = SoftNll::new(&m);
    let rows = [1usize, 2];
    let (_, _, gx) = value_and_grads(&loss, &w, &x, &rows[..], true).unwrap();
    let fd = central_differences(
        |d| {
            let xd = Tensor::new(x.shape().to_vec(), d.to_vec())?;
            value_and_grad(&loss, &w, &xd, &rows[..]).map(|r| r.0)
        },
        x.data(),
        1e-5,
        Parallelism::Sequential,
    )
    .unwrap();
    assert!(relative_error(gx.unwrap().data(), &fd, 1e-12) <= 1e-6);
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let (m, w, x) = setup(Arch::RecurrentGate, 50);
    let loss = SoftNll::new(&m);
    let rows = [0usize, 1, 2];
    let v = random_params(&w, 1.0, 3);
    let a = hvp_param(&loss, &w, &x, &rows[..], &v).unwrap();
    let b = hvp_param(&loss, &w, &x, &rows[..], &v).unwrap();
    assert_eq!(a, b);
}
