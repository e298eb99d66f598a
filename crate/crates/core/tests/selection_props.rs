use proptest::prelude::*;

use wormgrid::classad::{check_requirements, compute_rank, parse_ad, Value};
use wormgrid::resources::{derive_clique_ad, Clique, Directory, MachineSpec};
use wormgrid::selector::{select, SelectionRequest, DEFAULT_REQUEST_AD};

fn machine(i: usize) -> impl Strategy<Value = MachineSpec> {
    (
        prop::sample::select(vec!["cs.uiuc.edu", "ucsd.edu", "anl.gov"]),
        prop::sample::select(vec!["LINUX", "linux", "IRIX"]),
        1u32..128,
        prop::sample::select(vec![250.0, 500.0, 875.0, 1000.0, 1333.0]),
        prop::sample::select(vec![1u64 << 30, 2 << 30, 4 << 30, 8 << 30, 64 << 30]),
        prop::sample::select(vec![0.0, 0.25, 0.5, 1.0, 2.0]),
    )
        .prop_map(move |(domain, os, cpus, speed, mem, load)| MachineSpec {
            name: format!("m{i}"),
            domain: domain.into(),
            op_sys: os.into(),
            cpu_count: cpus,
            cpu_speed_mhz: speed,
            mem_bytes: mem,
            load,
            iter_rate_factor: 1.0,
        })
}

fn clique(name: String) -> impl Strategy<Value = Clique> {
    (1usize..5)
        .prop_flat_map(|n| (0..n).map(machine).collect::<Vec<_>>())
        .prop_map(move |members| Clique {
            name: name.clone(),
            members,
            link_bandwidth_mbps: 100.0,
            wan_bandwidth_mbps: 1.0,
        })
}

fn cliques(max: usize) -> impl Strategy<Value = Vec<Clique>> {
    (0..=max).prop_flat_map(|n| (0..n).map(|i| clique(format!("c{i:02}"))).collect::<Vec<_>>())
}

/// Brute force: rank every matching clique, keep the maximum, ties to the
/// smallest name.
fn argmax(request: &str, cs: &[Clique]) -> Option<(String, f64)> {
    let req = parse_ad(request).unwrap();
    let mut best: Option<(String, f64)> = None;
    for c in cs {
        let ad = derive_clique_ad(c, 0.0);
        if check_requirements(&req, &ad) != Ok(true) {
            continue;
        }
        let r = compute_rank(&req, &ad);
        let better = match &best {
            None => true,
            Some((n, b)) => r > *b || (r == *b && c.name < *n),
        };
        if better {
            best = Some((c.name.clone(), r));
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn selection_is_argmax_by_rank(cs in cliques(20)) {
        let mut dir = Directory::new();
        for c in &cs {
            dir.register(c.clone(), 60.0, 0.0).unwrap();
        }
        let req = SelectionRequest::parse(DEFAULT_REQUEST_AD, "t").unwrap();
        let got = select(&req, &dir, 0.0);
        let want = argmax(DEFAULT_REQUEST_AD, &cs);
        prop_assert_eq!(got.clone().record().clique, want.as_ref().map(|w| w.0.clone()));
        prop_assert_eq!(got.record().rank, want.map(|w| w.1));
        // Pure in its inputs.
        prop_assert_eq!(select(&req, &dir, 0.0), select(&req, &dir, 0.0));
    }
}

proptest! {
    #[test]
    fn aggregates_match_a_direct_fold(c in clique("x".into())) {
        let ad = derive_clique_ad(&c, 0.0);
        let cpus: i64 = c.members.iter().map(|m| m.cpu_count as i64).sum();
        let mut mem = u64::MAX;
        let mut speed = f64::INFINITY;
        let mut load = 0.0f64;
        for m in &c.members {
            mem = mem.min(m.mem_bytes);
            speed = speed.min(m.cpu_speed_mhz);
            load = load.max(m.load);
        }
        prop_assert_eq!(ad.eval_attr("CPUCount"), Value::Integer(cpus));
        prop_assert_eq!(ad.eval_attr("minMemSize"), Value::Integer(mem as i64));
        prop_assert_eq!(ad.eval_attr("minCPUSpeed"), Value::Real(speed));
        prop_assert_eq!(ad.eval_attr("maxCPULoad"), Value::Real(load));
        let eff = c.effective_machine();
        prop_assert_eq!(eff.cpu_count as i64, cpus);
        prop_assert_eq!(eff.iter_rate_factor, c.members.len() as f64);
    }

    #[test]
    fn derived_ads_never_produce_errors(c in clique("x".into())) {
        let ad = derive_clique_ad(&c, 0.0);
        // Printed and re-parsed, the derived ad behaves the same.
        let reparsed = parse_ad(&ad.to_string()).unwrap();
        prop_assert_eq!(&reparsed, &ad);
        let req = parse_ad(DEFAULT_REQUEST_AD).unwrap();
        for name in ["CPUCount", "minMemSize", "minCPUSpeed", "maxCPULoad", "domains", "bisectionBandwidth"] {
            prop_assert_ne!(ad.eval_attr(name), Value::Error, "{}", name);
        }
        prop_assert!(check_requirements(&req, &ad).is_ok());
        let expected = 100.0 * (1u64 << 30) as f64 / c.cpu_count() as f64;
        let mem = c.members.iter().map(|m| m.mem_bytes).min().unwrap() as f64;
        let same_os = c.members.iter().all(|m| m.op_sys.eq_ignore_ascii_case("linux"));
        let mut domains: Vec<&str> = c.members.iter().map(|m| m.domain.as_str()).collect();
        domains.sort();
        domains.dedup();
        let both = domains.contains(&"cs.uiuc.edu") && domains.contains(&"ucsd.edu");
        prop_assert_eq!(check_requirements(&req, &ad).unwrap(), same_os && mem > expected && both);
    }

    #[test]
    fn directory_hides_stale_entries(
        ops in prop::collection::vec((0u8..4, 0usize..4, 1u32..50, 1u32..40), 1..60)
    ) {
        // Oracle: the last refresh time and ttl of every name.
        let mut dir = Directory::new();
        let mut model: std::collections::BTreeMap<String, (f64, f64)> = Default::default();
        let mut now = 0.0;
        let template = Clique {
            name: String::new(),
            members: vec![MachineSpec {
                name: "m".into(),
                domain: "cs.uiuc.edu".into(),
                op_sys: "LINUX".into(),
                cpu_count: 1,
                cpu_speed_mhz: 1.0,
                mem_bytes: 1,
                load: 0.0,
                iter_rate_factor: 1.0,
            }],
            link_bandwidth_mbps: 1.0,
            wan_bandwidth_mbps: 1.0,
        };
        for (op, which, ttl, dt) in ops {
            now += dt as f64;
            let name = format!("c{which}");
            match op {
                0 => {
                    dir.register(Clique { name: name.clone(), ..template.clone() }, ttl as f64, now).unwrap();
                    model.insert(name, (now, ttl as f64));
                }
                1 => {
                    if dir.heartbeat(&name, now).is_ok() {
                        model.get_mut(&name).unwrap().0 = now;
                    }
                }
                2 => {
                    dir.refresh(now);
                    model.retain(|_, (t, ttl)| now <= *t + *ttl);
                }
                _ => {
                    dir.deregister(&name);
                    model.remove(&name);
                }
            }
            let live: Vec<String> = dir.live(now).map(|c| c.name.clone()).collect();
            let want: Vec<String> =
                model.iter().filter(|(_, (t, ttl))| now <= t + ttl).map(|(n, _)| n.clone()).collect();
            prop_assert_eq!(live, want);
            for i in 0..4 {
                let n = format!("c{i}");
                let fresh = model.get(&n).is_some_and(|(t, ttl)| now <= t + ttl);
                prop_assert_eq!(dir.get(&n, now).is_some(), fresh);
            }
        }
    }
}
