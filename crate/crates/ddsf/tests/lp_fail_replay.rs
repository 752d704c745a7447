use ddsf::consets::BoxSet;
use ddsf::safeset::SampledSafeSet;
use nalgebra::DVector;

#[test]
fn replay_dumped_failure() {
    let text = std::fs::read_to_string("/tmp/lp_fail.txt").unwrap();
    let mut rows: Vec<DVector<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| DVector::from_vec(l.split(',').map(|v| v.parse().unwrap()).collect::<Vec<f64>>()))
        .collect();
    let xi = rows.remove(0);
    let mut csv = String::new();
    csv.push_str(&(0..xi.len()).map(|i| format!("xi_{i}")).collect::<Vec<_>>().join(","));
    csv.push('\n');
    for v in &rows {
        csv.push_str(&v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(","));
        csv.push('\n');
    }
    let u_set = BoxSet::symmetric(1.0, 1).unwrap().to_polytope().unwrap();
    let y_set = BoxSet::symmetric(1.0, 1).unwrap().to_polytope().unwrap();
    let set = SampledSafeSet::read_csv(csv.as_bytes(), 3, 1, 1, u_set, y_set).unwrap();
    match set.distance(&xi) {
        Ok(d) => println!("distance = {d:e}"),
        Err(e) => println!("LP ERROR: {e}"),
    }
}
