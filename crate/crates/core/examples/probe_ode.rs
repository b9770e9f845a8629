// scratch calibration probe (deleted before finalizing)
use pfode::commands::DiskCohort;
use pfode::pipeline::map_features;
use pfode::volume::read_tauv;
use std::path::Path;

fn main() {
    let cohort = DiskCohort::load(Path::new("/tmp/golden-run/cohort")).unwrap();
    for s in &cohort.subjects {
        let map = read_tauv(Path::new(&format!("/tmp/golden-run/maps/{}_map.tauv", s.id))).unwrap();
        let f = map_features(&map, &cohort.brain).unwrap();
        let lat = cohort.latent(&s.id).unwrap();
        let rec = read_tauv(Path::new(&format!("/tmp/golden-run/recon/{}_recon.tauv", s.id))).unwrap();
        let d = lat.l2_distance(&rec).unwrap();
        println!("{}: mean={:+.5} max={:.4} p95={:.4} posfrac={:.3} | latent-recon L2={:.4}",
            s.id, f[0], f[1], f[2], f[3], d);
    }
}
