// Trains a small model on a generated graph and prints test accuracy.
//
//   ./minimal_usage [dataset-dir]
//
// With no argument the 50-node homophily toy graph is generated in memory.

#include <iostream>

#include "hopflow/hopflow.hpp"

int main(int argc, char** argv)
{
    using namespace hopflow;
    try {
        Dataset ds = argc > 1 ? load_dataset(argv[1]) : toy::make_homophily(0);

        TrainConfig cfg;
        cfg.model.hops = 3;
        cfg.model.hidden = 16;
        cfg.max_epochs = 100;
        cfg.patience = 50;

        HopTensor hops = precompute_hops(normalize(ds.graph, NormMode::sym, true), ds.features, cfg.model.hops);
        auto splits = make_labeled_splits(ds.labels, SplitRatios{}, 0, 1);
        auto result = train(hops, ds.labels, splits[0], cfg);

        std::cout << "best epoch " << result.report.best_epoch << ", test accuracy " << result.report.test_accuracy << "\n";
    } catch (const Error& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 0;
}
