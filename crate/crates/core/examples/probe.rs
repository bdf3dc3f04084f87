use capt_core::attack::AttackConfig;
use capt_core::data::*;
use capt_core::eval::*;
use capt_core::objectives::*;
use capt_core::pretrain::*;
use capt_core::trainer::*;
use capt_core::mix_seed;
use rayon::prelude::*;

#[derive(Default, Clone, Copy)]
struct Acc { cln: (f64,f64), adv: (f64,f64), f4: (f64,f64),
             f4_s: (f64,f64), adv_sc: f64, cln_sc: f64 }

fn main() {
    let eps = 8.0 / 255.0;
    let t0 = std::time::Instant::now();
    // Canonical task and backbone; seeds vary only the tuning pipeline.
    let d = generate(&SynthSpec::default()).unwrap();
    let (state, _) = pretrain_contrastive(&d, &PretrainConfig::default()).unwrap();
    let frozen = state.frozen_copy();
    let idx = subsample_per_class(&d.test, 8, |_| 12, mix_seed(0, 0xe1));
    let (images, labels) = gather(&d.test, &idx);
    let shifted = {
        let split = Split { images: images.clone(), labels: labels.clone(), jitter: vec![[0.0,0.0]; images.len()] };
        apply_shift(&split, &ShiftSpec { kind: ShiftKind::ValueJitter, intensity: 0.3 }).unwrap()
    };
    let ecfg = AttackConfig::eval(eps);
    let hep = clean_and_robust_accuracy(&state, &images, &labels, 8, &ecfg, 32, mix_seed(99, 1)).unwrap();
    let hep_s = clean_and_robust_accuracy(&state, &shifted.images, &shifted.labels, 8, &ecfg, 32, mix_seed(99, 2)).unwrap();
    println!("HEP ({:.3},{:.3}) shifted ({:.3},{:.3})", hep.0, hep.1, hep_s.0, hep_s.1);

    let outs: Vec<Acc> = (0..5u64).into_par_iter().map(|seed| {
        let ev = |m: &capt_core::encoder::ModelState, im: &[capt_core::Array], la: &[usize], salt: u64|
            clean_and_robust_accuracy(m, im, la, 8, &ecfg, 32, mix_seed(seed, salt)).unwrap();
        let evc = |m: &capt_core::encoder::ModelState, im: &[capt_core::Array], la: &[usize]|
            clean_accuracy(m, im, la, 8, 32).unwrap();
        let tuned = |mask: AblationMask, lambda: f64| {
            let mut mm = state.clone();
            let cfg = TrainConfig { epochs: 30, shots: Shots::N(16), seed: mix_seed(seed, 0x70),
                attack: AttackConfig::train(eps), val_robust_cap: 16,
                objective: ObjectiveConfig { lambda, ablation_mask: mask, ..ObjectiveConfig::default() }, ..TrainConfig::default() };
            tune(&mut mm, &frozen, &d, &cfg, None).unwrap();
            mm
        };
        let mut a = Acc::default();
        let m = tuned(AblationMask::CE_CLEAN_ONLY, 0.0);
        a.cln = ev(&m, &images, &labels, 3); a.cln_sc = evc(&m, &shifted.images, &shifted.labels);
        let m = tuned(AblationMask::CE_ADV_ONLY, 0.0);
        a.adv = ev(&m, &images, &labels, 4); a.adv_sc = evc(&m, &shifted.images, &shifted.labels);
        let m = tuned(AblationMask::FULL, 0.4);
        a.f4 = ev(&m, &images, &labels, 5);
        a.f4_s = ev(&m, &shifted.images, &shifted.labels, 6);
        eprintln!("seed {seed}: cln ({:.3},{:.3}) adv ({:.3},{:.3}) f4 ({:.3},{:.3}) f4_s ({:.3},{:.3}) adv_sc {:.3} cln_sc {:.3}",
            a.cln.0,a.cln.1, a.adv.0,a.adv.1, a.f4.0,a.f4.1, a.f4_s.0,a.f4_s.1, a.adv_sc, a.cln_sc);
        a
    }).collect();
    let m = |f: &dyn Fn(&Acc) -> f64| outs.iter().map(f).sum::<f64>() / outs.len() as f64;
    println!("\n===== canonical-task 5-tune-seed means (wall {:.0}s) =====", t0.elapsed().as_secs_f64());
    println!("HEP    clean {:.4} robust {:.4} | shifted {:.4}/{:.4}", hep.0, hep.1, hep_s.0, hep_s.1);
    println!("cln    clean {:.4} robust {:.4} | shifted clean {:.4}", m(&|a| a.cln.0), m(&|a| a.cln.1), m(&|a| a.cln_sc));
    println!("adv    clean {:.4} robust {:.4} | shifted clean {:.4}", m(&|a| a.adv.0), m(&|a| a.adv.1), m(&|a| a.adv_sc));
    println!("full.4 clean {:.4} robust {:.4} | shifted {:.4}/{:.4}", m(&|a| a.f4.0), m(&|a| a.f4.1), m(&|a| a.f4_s.0), m(&|a| a.f4_s.1));
}
