use proptest::prelude::*;
use symbiotic::graph::Graph;
use symbiotic::metrics::average_precision;
use symbiotic::tensor::Tensor;

fn shape_and_data() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(1usize..5, 1..5).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(-1e6f64..1e6, n))
    })
}

proptest! {
    #[test]
    fn stns_round_trip((shape, data) in shape_and_data()) {
        let t = Tensor::new(&shape, data).unwrap();
        let back = Tensor::from_stns_bytes(&t.to_stns_bytes()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn broadcast_add_matches_loops(a in prop::collection::vec(-5f64..5.0, 6), b in prop::collection::vec(-5f64..5.0, 3)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 3], a.clone()).unwrap());
        let y = g.constant(Tensor::new(&[3], b.clone()).unwrap());
        let z = g.add(x, y).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                prop_assert_eq!(g.value(z).data()[i * 3 + j], a[i * 3 + j] + b[j]);
            }
        }
    }

    #[test]
    fn ap_is_invariant_to_positive_scaling(
        scores in prop::collection::vec(-10f64..10.0, 2..40),
        seed in any::<u64>(),
    ) {
        let labels: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
        let present = vec![true; scores.len()];
        let ap = average_precision(&scores, &labels, &present).unwrap();
        let scaled: Vec<f64> = scores.iter().map(|s| s * 4.0).collect();
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert_eq!(ap, average_precision(&scaled, &labels, &present).unwrap());
    }
}
