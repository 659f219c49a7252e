#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "widthscale/errors.hpp"
#include "widthscale/netcore.hpp"
#include "widthscale/rng.hpp"

namespace widthscale {

// Two isotropic unit-variance gaussian classes with means +-mu e1, labels +-1;
// features scaled by 1/sqrt(d_x) afterwards.
inline std::pair<Dataset, Dataset> synth_dataset(int d_x, int n_train, int n_test, double mu,
                                                 std::uint64_t seed) {
    if (d_x < 1 || n_train < 1 || n_test < 1) throw Error("synth_dataset sizes must be >= 1");
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_x));
    auto make = [&](int n, Rng& rng) {
        Dataset ds;
        ds.input_dim = d_x;
        ds.points.resize(n);
        for (auto& p : ds.points) {
            p.y = (rng.next_u64() & 1) ? 1 : -1;
            p.x.resize(d_x);
            for (int k = 0; k < d_x; ++k) {
                const double mean = k == 0 ? mu * static_cast<double>(p.y) : 0.0;
                p.x[k] = (rng.gaussian() + mean) * scale;
            }
        }
        return ds;
    };
    Rng rng_train(substream_seed(seed, 0x7121ull));
    Rng rng_test(substream_seed(seed, 0x7e57ull));
    Dataset train = make(n_train, rng_train);
    Dataset test = make(n_test, rng_test);
    train.name = "synthetic-train";
    test.name = "synthetic-test";
    train.preprocessing = test.preprocessing =
        "gaussian blobs +-mu e1, features / sqrt(d_x)";
    return {std::move(train), std::move(test)};
}

namespace cifar {

inline constexpr int kRecordBytes = 3073;  // 1 label byte + 3072 pixels
inline constexpr int kPixels = 3072;
inline constexpr int kTrainQuota = 1024;
inline constexpr int kTestQuota = 2000;

// Pixel byte -> feature: v/127.5 - 1, then / sqrt(3072).
inline double pixel_to_feature(unsigned char v) noexcept {
    static const double root = std::sqrt(3072.0);
    return (static_cast<double>(v) / 127.5 - 1.0) / root;
}

// Pulls records with label byte 0 (y=+1) or 1 (y=-1) out of one batch file,
// in file order, until the quota is met. Returns how many records were taken.
inline void ingest_file(const std::filesystem::path& path, int quota, Dataset& out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open " + path.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() % kRecordBytes != 0) {
        throw IngestError(path.string() + ": truncated record at byte offset "
                          + std::to_string(buf.size() - buf.size() % kRecordBytes));
    }
    const std::size_t n_records = buf.size() / kRecordBytes;
    for (std::size_t rec = 0; rec < n_records; ++rec) {
        if (static_cast<int>(out.points.size()) >= quota) return;
        const unsigned char* r =
            reinterpret_cast<const unsigned char*>(buf.data()) + rec * kRecordBytes;
        const unsigned char label = r[0];
        if (label > 9) {
            throw CorruptRecord(path.string() + ": label byte " + std::to_string(label)
                                + " at byte offset " + std::to_string(rec * kRecordBytes));
        }
        if (label > 1) continue;  // keep only the first two classes
        DataPoint p;
        p.y = label == 0 ? 1 : -1;
        p.x.resize(kPixels);
        for (int k = 0; k < kPixels; ++k) p.x[k] = pixel_to_feature(r[1 + k]);
        out.points.push_back(std::move(p));
    }
}

}  // namespace cifar

// CIFAR2: first two classes of the CIFAR-10 binary format (3073-byte records,
// channel-major R/G/B planes of a 32x32 row-major image). Train takes the
// first 1024 qualifying records across data_batch_1..5.bin in file order;
// test takes the first 2000 from test_batch.bin.
inline std::pair<Dataset, Dataset> load_cifar2(const std::string& dir_path) {
    namespace fs = std::filesystem;
    const fs::path dir(dir_path);

    Dataset train;
    train.name = "cifar2-train";
    train.input_dim = cifar::kPixels;
    train.preprocessing = "v/127.5-1, / sqrt(3072)";
    for (int i = 1; i <= 5 && static_cast<int>(train.points.size()) < cifar::kTrainQuota; ++i) {
        const fs::path f = dir / ("data_batch_" + std::to_string(i) + ".bin");
        if (!fs::exists(f)) throw IngestError("missing batch file " + f.string());
        cifar::ingest_file(f, cifar::kTrainQuota, train);
    }
    if (static_cast<int>(train.points.size()) < cifar::kTrainQuota) {
        throw IngestError("train batches hold fewer than 1024 class-0/1 records");
    }

    Dataset test;
    test.name = "cifar2-test";
    test.input_dim = cifar::kPixels;
    test.preprocessing = train.preprocessing;
    const fs::path tf = dir / "test_batch.bin";
    if (!fs::exists(tf)) throw IngestError("missing batch file " + tf.string());
    cifar::ingest_file(tf, cifar::kTestQuota, test);
    if (static_cast<int>(test.points.size()) < cifar::kTestQuota) {
        throw IngestError("test batch holds fewer than 2000 class-0/1 records");
    }
    return {std::move(train), std::move(test)};
}

}  // namespace widthscale
