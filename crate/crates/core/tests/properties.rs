use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use v2g_core::battery::{
    count_half_cycles, soc_step, soh_advance, soh_evaluate, sop_power_limits, CellPack, OcvCurve, SohParams, SohState,
    SopWindow,
};
use v2g_core::config::RunConfig;
use v2g_core::env::{project_tie_line, safety_clip};
use v2g_core::fleet::{
    build_envelope, envelope_admits, ev_energy_bounds, read_fleet_csv, sample_fleet, write_fleet_csv, EvState,
    FleetDistribution,
};
use v2g_core::microgrid::load_variance;
use v2g_core::pos::{allocate, AllocMember, PosConfig};

fn member() -> impl Strategy<Value = AllocMember> {
    (
        10.0..30.0_f64,
        0.05..0.5_f64,
        0.0..0.5_f64,
        -3.0..3.0_f64,
        1.0..7.0_f64,
        0.0..8.0_f64,
        0.85..1.0_f64,
        any::<bool>(),
    )
        .prop_map(|(q, lo, width, offset, p, sop, eta, plugged)| {
            let e_lo = q * lo;
            let e_hi = (e_lo + q * width).min(q);
            AllocMember {
                ev_id: 0,
                energy_kwh: (e_lo + e_hi) / 2.0 + offset,
                e_lower_kwh: e_lo,
                e_upper_kwh: e_hi,
                p_discharge_max_kw: if plugged { -p } else { 0.0 },
                p_charge_max_kw: if plugged { p } else { 0.0 },
                sop_discharge_kw: -sop,
                sop_charge_kw: sop,
                efficiency: eta,
                dt_hours: 1.0,
            }
        })
}

proptest! {
    #[test]
    fn soc_step_reverses(e in 0.0..30.0_f64, p in -7.0..7.0_f64, eta in 0.8..=1.0_f64, dt in 0.25..2.0_f64) {
        let back = soc_step(soc_step(e, p, eta, dt), -p, eta, dt);
        prop_assert!((back - e).abs() < 1e-12);
    }

    #[test]
    fn soh_falls_with_cycles(avg in 0.0..=1.0_f64, delta in 0.0..=1.0_f64, w in 0.0..5000.0_f64, extra in 0.0..100.0_f64) {
        prop_assert!(soh_evaluate(avg, delta, w + extra) <= soh_evaluate(avg, delta, w));
        prop_assert!(soh_evaluate(avg, delta, w) <= 100.0);
    }

    #[test]
    fn aging_never_reverses(steps in prop::collection::vec(-0.15..0.15_f64, 2..40), start in 0.2..0.8_f64) {
        let mut soc = vec![start];
        for s in &steps {
            soc.push((soc[soc.len() - 1] + s).clamp(0.0, 1.0));
        }
        let current: Vec<f64> = steps.iter().map(|s| s * 40.0).collect();
        let params = SohParams::default();
        let cycles = count_half_cycles(&soc, &current, params.dod_floor);
        prop_assert!(cycles.iter().all(|c| c.dod > 0.0 && c.dod <= 100.0));
        let (lo, hi) = soc.iter().fold((1.0_f64, 0.0_f64), |(a, b), &s| (a.min(s), b.max(s)));
        let before = SohState::default();
        let after = soh_advance(&before, &params, &cycles, 0.5 * (lo + hi), hi - lo);
        prop_assert!(after.soh_percent <= before.soh_percent);
        prop_assert!(after.equivalent_full_cycles >= before.equivalent_full_cycles);
    }

    #[test]
    fn sop_limits_have_their_signs(soc in 0.0..=1.0_f64) {
        let (ch, dis) = sop_power_limits(&CellPack::default_vehicle(), &OcvCurve::lfp_default(), soc, &SopWindow::default());
        prop_assert!(ch >= 0.0 && dis <= 0.0, "{ch} {dis}");
    }

    #[test]
    fn allocation_conserves_the_request(
        members in prop::collection::vec(member(), 1..10),
        request in -60.0..60.0_f64,
        seed in any::<u64>(),
    ) {
        let members: Vec<AllocMember> =
            members.into_iter().enumerate().map(|(i, m)| AllocMember { ev_id: i as u32, ..m }).collect();
        let ages = vec![100.0; members.len()];
        let plan = allocate(request, &members, &ages, &PosConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((plan.allocated_kw() + plan.residual_kw - request).abs() < 1e-9);
        for (m, &p) in members.iter().zip(&plan.power_kw) {
            let (lo, hi) = m.power_box();
            prop_assert!(p >= lo - 1e-9 && p <= hi + 1e-9);
        }
    }

    #[test]
    fn tie_line_projection_stays_in_intervals(
        boxes in prop::collection::vec((-20.0..0.0_f64, 0.0..20.0_f64, 0.0..=1.0_f64), 1..5),
        base in -50.0..150.0_f64,
    ) {
        let intervals: Vec<(f64, f64)> = boxes.iter().map(|&(a, b, _)| (a, b)).collect();
        let mut p: Vec<f64> = boxes.iter().map(|&(a, b, t)| a + t * (b - a)).collect();
        let (lo, hi) = (0.0, 100.0);
        let ok = project_tie_line(&mut p, &intervals, base, lo, hi);
        prop_assert!(p.iter().zip(&intervals).all(|(&x, &(a, b))| x >= a - 1e-9 && x <= b + 1e-9));
        let total = base + p.iter().sum::<f64>();
        if ok {
            prop_assert!(total >= lo - 1e-9 && total <= hi + 1e-9);
        } else {
            // only when the intervals cannot reach the limits
            let reach_lo = base + intervals.iter().map(|i| i.0).sum::<f64>();
            let reach_hi = base + intervals.iter().map(|i| i.1).sum::<f64>();
            prop_assert!(reach_hi < lo || reach_lo > hi);
        }
    }

    #[test]
    fn clipped_dispatch_stays_in_the_envelope(
        seed in any::<u64>(),
        count in 1usize..6,
        raw in prop::collection::vec(-1.0..=1.0_f64, 20),
    ) {
        let fleet = sample_fleet(count, seed, &FleetDistribution::default()).unwrap();
        let soh = SohState::default();
        let now = 15;
        let states: Vec<EvState> = fleet.iter().map(|ev| EvState::at_arrival(ev, soh.clone(), now)).collect();
        let members: Vec<_> = fleet.iter().zip(&states).collect();
        let envelope = build_envelope(&members, now, 20, 1.0);
        let mut e = vec![states.iter().map(|s| s.energy_kwh).sum::<f64>()];
        for (k, r) in raw.iter().enumerate() {
            let request = envelope.p_lower_kw[k] + 0.5 * (r + 1.0) * (envelope.p_upper_kw[k] - envelope.p_lower_kw[k]);
            let (p, _) = safety_clip(request, &envelope, k, e[k], 1.0);
            e.push(e[k] + envelope.efficiency * p);
        }
        prop_assert!(envelope_admits(&envelope, &e));
    }

    #[test]
    fn per_ev_dispatch_sums_are_admitted(seed in any::<u64>(), count in 1usize..5, raw in prop::collection::vec(-1.0..=1.0_f64, 80)) {
        let fleet = sample_fleet(count, seed, &FleetDistribution::default()).unwrap();
        let soh = SohState::default();
        let now = 15;
        let start: Vec<EvState> = fleet.iter().map(|ev| EvState::at_arrival(ev, soh.clone(), now)).collect();
        let members: Vec<_> = fleet.iter().zip(&start).collect();
        let envelope = build_envelope(&members, now, 20, 1.0);
        // each EV follows random powers clipped to its own next-instant bounds
        let mut states = start.clone();
        let mut total = vec![states.iter().map(|s| s.energy_kwh).sum::<f64>()];
        for k in 0..20u32 {
            for (n, (ev, st)) in fleet.iter().zip(states.iter_mut()).enumerate() {
                let (pl, pu) = ev.power_bounds(now + k);
                let (el, eu) = ev_energy_bounds(ev, st, now + k, now + k + 1, 1.0);
                let r = raw[(k as usize * count + n) % raw.len()];
                let mut p = pl + 0.5 * (r + 1.0) * (pu - pl);
                p = p.clamp((el - st.energy_kwh) / ev.efficiency, (eu - st.energy_kwh) / ev.efficiency);
                st.energy_kwh = soc_step(st.energy_kwh, p, ev.efficiency, 1.0);
            }
            total.push(states.iter().map(|s| s.energy_kwh).sum());
        }
        prop_assert!(envelope_admits(&envelope, &total));
    }

    #[test]
    fn fleet_csv_round_trips(seed in any::<u64>(), count in 0usize..40) {
        let fleet = sample_fleet(count, seed, &FleetDistribution::default()).unwrap();
        let mut buf = Vec::new();
        write_fleet_csv(&fleet, &mut buf).unwrap();
        prop_assert_eq!(read_fleet_csv(buf.as_slice()).unwrap(), fleet);
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), count in 1usize..2000, agents in 1usize..6, kl in 1e-4..0.1_f64) {
        let mut cfg = RunConfig::default().with_seed(seed);
        cfg.fleet.count = count;
        cfg.env.n_agents = agents;
        cfg.train.kl_delta = kl;
        prop_assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn variance_ignores_a_shift(xs in prop::collection::vec(-500.0..500.0_f64, 24), shift in -1000.0..1000.0_f64) {
        let moved: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let (a, b) = (load_variance(&xs), load_variance(&moved));
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-7 * a.max(1.0));
    }
}
