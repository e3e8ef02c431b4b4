use stseg::em::{fit, FitConfig};
use stseg::eval::boundary_from_labels;
use stseg::field::{argmax_labels, entropy_map, Lattice};
use stseg::synth::{default_components, gen_prior_field, sample_image, SynthSpec, Uncertainty};

#[test]
fn probe2() {
    let side = 160usize;
    let seed = 200u64;
    let spec = SynthSpec::new(
        Lattice::new(side, side).unwrap(),
        default_components(3),
        Uncertainty::Low,
        seed,
    )
    .unwrap();
    let p_true = gen_prior_field(&spec);
    let (features, labels) = sample_image(&spec, &p_true);
    let cfg = FitConfig { sigma: 4.25, seed, with_spatial_prior: true, ..FitConfig::default() };
    let (model, _, _) = fit(&features, 3, &cfg).unwrap();
    let ent = entropy_map(&model.prior.p);
    let mut vals: Vec<f64> = ent.data().to_vec();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let thr = vals[(0.9 * vals.len() as f64) as usize];
    let l = spec.lattice;
    let hot: Vec<bool> = ent.data().iter().map(|&e| e >= thr).collect();
    let truth_boundary = boundary_from_labels(&argmax_labels(&p_true));

    let mut shown = 0;
    for i in 0..l.n_pixels() {
        if !truth_boundary.on()[i] {
            continue;
        }
        let (r, c) = l.coords(i);
        let mut near = false;
        'scan: for dr in -2i64..=2 {
            for dc in -2i64..=2 {
                if dr * dr + dc * dc > 4 {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= l.height() as i64 || nc >= l.width() as i64 {
                    continue;
                }
                if hot[nr as usize * l.width() + nc as usize] {
                    near = true;
                    break 'scan;
                }
            }
        }
        if near || shown >= 5 {
            continue;
        }
        shown += 1;
        let t = p_true.data().row(i);
        let p = model.prior.p.data().row(i);
        let m = model.prior.location.data().row(i);
        // Local sampled-label histogram 9x9.
        let mut histo = [0usize; 3];
        for dr in -4i64..=4 {
            for dc in -4i64..=4 {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= side as i64 || nc >= side as i64 {
                    continue;
                }
                histo[labels.labels()[nr as usize * side + nc as usize] as usize] += 1;
            }
        }
        println!(
            "({r},{c}) truth [{:.3} {:.3} {:.3}] fit p [{:.3} {:.3} {:.3}] m [{:.3} {:.3} {:.3}] labels9x9 {histo:?}",
            t[0], t[1], t[2], p[0], p[1], p[2], m[0], m[1], m[2]
        );
    }
}
