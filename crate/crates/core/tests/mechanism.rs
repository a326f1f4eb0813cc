mod common;

use common::*;
use proptest::prelude::*;
use tapwb_core::*;

const STEPS: [&str; 6] = [
    "CO + * <-> CO*",
    "O2 + 2* <-> 2O*",
    "CO* + O* <-> CO2 + 2*",
    "CO + O* <-> CO2 + *",
    "CO* + * <-> C* + O*",
    "C* + O2 <-> CO2 + O*",
];

proptest! {
    #[test]
    fn surface_sites_are_conserved(
        pick in proptest::sample::subsequence(STEPS.to_vec(), 1..=6),
        k in proptest::collection::vec(0.0f64..100.0, 12),
        conc in proptest::collection::vec(0.0f64..5.0, 8),
    ) {
        let lines: Vec<(&str, &[&str])> = pick.iter().map(|l| (*l, &["1", "1"][..])).collect();
        let m = mech(&lines, &[("CO", 28.0), ("O2", 32.0), ("CO2", 44.0)]);
        let n = m.n_steps();
        let kc = RateConstants { forward: k[..n].to_vec(), reverse: k[6..6 + n].to_vec() };
        let (_, prod) = m.rate_vector(&conc[..3], &conc[3..3 + m.n_surface()], &kc).unwrap();
        // every adsorbate here holds one site
        let sites: f64 = prod[m.n_gas()..].iter().sum();
        let scale: f64 = prod.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        prop_assert!(sites.abs() <= 1e-12 * scale, "{sites}");

        for row in m.stoichiometry().iter().skip(m.n_gas()).fold(vec![0; n], |mut acc, r| {
            acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
            acc
        }).iter() {
            prop_assert_eq!(*row, 0);
        }
    }

    #[test]
    fn unbalanced_sites_are_rejected(extra in 2u32..5) {
        let line = format!("CO + {extra}* -> CO*");
        let lines: Vec<(String, Vec<String>)> = vec![(line, vec!["1".into()])];
        let gases = vec![("CO".to_string(), 28.0)];
        prop_assert!(Mechanism::parse(&lines, &gases).is_err());
    }
}
