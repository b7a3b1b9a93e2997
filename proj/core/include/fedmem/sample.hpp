#ifndef FEDMEM_SAMPLE_HPP
#define FEDMEM_SAMPLE_HPP

#include <vector>

namespace fedmem {

/// One labeled example. Labels are dense class ids in [0, num_classes).
struct Sample {
    std::vector<double> features;
    int label = 0;

    bool operator==(const Sample&) const = default;
};

} // namespace fedmem

#endif
