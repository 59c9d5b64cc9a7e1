#![allow(dead_code)]

use depulse::pipeline::{InjectedPulse, InjectionSpec};
use depulse::pulse::ShapeTailParams;
use depulse::signal::Signal;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub const FS: u32 = 44_100;

/// Stationary AR(2) excitation with weak correlation, standing in for
/// broadband programme material.
pub fn ar_fixture(len: usize, seed: u64) -> Signal<f64> {
    ar_fixture_scaled(len, seed, 0.02)
}

pub fn ar_fixture_scaled(len: usize, seed: u64, sd: f64) -> Signal<f64> {
    let a = [0.3, -0.1];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let warm = 500;
    let mut x = vec![0.0f64; len + warm];
    for n in 2..x.len() {
        let e: f64 = rng.sample(StandardNormal);
        x[n] = a[0] * x[n - 1] + a[1] * x[n - 2] + sd * e;
    }
    Signal::new(x.split_off(warm), FS).unwrap()
}

pub fn reference_tail() -> ShapeTailParams<f64> {
    ShapeTailParams {
        v_t: 0.3,
        tau_m: 0.07,
        tau_f: 0.013,
        f_max: 60.0,
        f_min: 20.0,
        phi: 0.0,
    }
}

pub fn reference_pulse(n0: usize, tail_len: usize) -> InjectedPulse<f64> {
    InjectedPulse {
        n0,
        m: 10,
        sigma_d2: 0.5,
        tail: reference_tail(),
        tail_len,
    }
}

/// 3 s fixture with the reference pulse one second in.
pub fn reference_fixture(seed: u64) -> (Signal<f64>, Signal<f64>, InjectedPulse<f64>) {
    let clean = ar_fixture(3 * FS as usize, seed);
    let p = reference_pulse(FS as usize, 7500);
    let spec = InjectionSpec {
        pulses: vec![p.clone()],
        seed: seed ^ 0x5eed,
    };
    let deg = depulse::pipeline::inject_pulse(&clean, &spec).unwrap();
    (clean, deg, p)
}

/// `count` evenly spaced reference pulses over an 8 s fixture.
pub fn multi_fixture(count: usize, seed: u64) -> (Signal<f64>, Signal<f64>, InjectionSpec<f64>) {
    let len = 8 * FS as usize;
    let clean = ar_fixture(len, seed);
    let spec = InjectionSpec::uniform(len, count, &reference_pulse(0, 7500), seed ^ 0xabc).unwrap();
    let deg = depulse::pipeline::inject_pulse(&clean, &spec).unwrap();
    (clean, deg, spec)
}
