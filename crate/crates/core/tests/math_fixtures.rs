use detcam::real::Real;
use detcam::tensor::{reduce, ReduceOp};
use detcam::{DetRng, Tensor};

fn fixture(name: &str) -> Vec<(f32, f32)> {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace().map(|h| f32::from_bits(u32::from_str_radix(h, 16).unwrap()));
            (it.next().unwrap(), it.next().unwrap())
        })
        .collect()
}

/// Distance in units in the last place between two finite floats.
fn ulps(a: f32, b: f32) -> u32 {
    let key = |v: f32| {
        let i = v.to_bits() as i32;
        if i < 0 {
            i32::MIN - i
        } else {
            i
        }
    };
    key(a).abs_diff(key(b))
}

#[test]
fn exp_within_two_ulp_of_reference() {
    let cases = fixture("exp_f32.txt");
    assert!(cases.len() >= 1000);
    let worst = cases.iter().map(|&(x, y)| ulps(x.det_exp(), y)).max().unwrap();
    assert!(worst <= 2, "worst exp error {worst} ulp");
}

#[test]
fn ln_within_two_ulp_of_reference() {
    let cases = fixture("ln_f32.txt");
    assert!(cases.len() >= 1000);
    let worst = cases.iter().map(|&(x, y)| ulps(x.det_ln(), y)).max().unwrap();
    assert!(worst <= 2, "worst ln error {worst} ulp");
}

#[test]
fn million_tenths_match_sequential_loop() {
    let n = 1_000_000;
    let t = Tensor::full([n], 0.1f32).unwrap();
    let mut acc = 0f32;
    for _ in 0..n {
        acc += 0.1;
    }
    let got = reduce(ReduceOp::Sum, &t, &[0]).unwrap();
    assert_eq!(got.data()[0].to_bits(), acc.to_bits());
}

#[test]
fn reductions_ignore_thread_count() {
    let mut rng = DetRng::new(9, "reduce");
    let t = detcam::rng::uniform(&mut rng, 64 * 33 * 7).unwrap().reshape([64, 33, 7]).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            [vec![0], vec![1], vec![2], vec![0, 1], vec![0, 1, 2]]
                .iter()
                .flat_map(|axes| {
                    let s = reduce(ReduceOp::Sum, &t, axes).unwrap();
                    let m = reduce(ReduceOp::Mean, &t, axes).unwrap();
                    s.data().iter().chain(m.data()).map(|v| v.to_bits()).collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        })
    };
    let one = run(1);
    assert_eq!(one, run(2));
    assert_eq!(one, run(8));
}
