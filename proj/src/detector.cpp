#include "patchforge/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "patchforge/conv.hpp"
#include "patchforge/optim.hpp"
#include "patchforge/rng.hpp"

namespace patchforge {

void DetectorConfig::validate() const {
    if (image_size % grid != 0) throw std::invalid_argument("image_size must be divisible by grid");
    if (boxes < 1) throw std::invalid_argument("need at least one box per cell");
    if (static_cast<int>(anchors.size()) != boxes) throw std::invalid_argument("anchor count must equal boxes");
    if (classes < 1) throw std::invalid_argument("need at least one class");
    int size = image_size;
    for (auto [ch, stride] : blocks) size /= stride;
    if (size != grid) throw std::invalid_argument("backbone strides do not reduce image_size to grid");
}

namespace {
double sigmoid_d(double z) { return 1.0 / (1.0 + std::exp(-z)); }
double softplus(double z) { return std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0); }
}  // namespace

DetectorParams DetectorParams::init(const DetectorConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    DetectorParams p;
    p.config = config;
    int cin = 3;
    auto make_conv = [&](int cout, int k) {
        const int fan_in = cin * k * k;
        const double bound = std::sqrt(6.0 / fan_in);
        Tensor kernel({cout, cin, k, k});
        for (std::size_t i = 0; i < kernel.size(); ++i) kernel[i] = static_cast<float>(rng.uniform(-bound, bound));
        p.tensors.push_back(std::move(kernel));
        p.tensors.emplace_back(std::vector<int>{cout});
        cin = cout;
    };
    for (auto [ch, stride] : config.blocks) make_conv(ch, 3);
    make_conv(config.head_channels(), 1);

    // damp the head so initial logits sit near zero: keeps the initial coord
    // loss small and the first gradient steps well-conditioned
    Tensor& head_kernel = p.tensors[p.tensors.size() - 2];
    for (std::size_t i = 0; i < head_kernel.size(); ++i) head_kernel[i] *= 0.1f;

    // bias the objectness logits low so the untrained detector is quiet
    Tensor& head_bias = p.tensors.back();
    for (int b = 0; b < config.boxes; ++b) head_bias[static_cast<std::size_t>(b * (5 + config.classes) + 4)] = -2.0f;
    return p;
}

std::uint64_t DetectorParams::checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const Tensor& t : tensors)
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint32_t bits;
            float v = t[i];
            std::memcpy(&bits, &v, 4);
            for (int b = 0; b < 4; ++b) {
                h ^= (bits >> (8 * b)) & 0xff;
                h *= 1099511628211ULL;
            }
        }
    return h;
}

void save_weights(const std::string& path, const DetectorParams& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    const DetectorConfig& c = params.config;
    os << "miniyolo image_size=" << c.image_size << " grid=" << c.grid << " boxes=" << c.boxes
       << " classes=" << c.classes << " anchors=";
    for (std::size_t i = 0; i < c.anchors.size(); ++i)
        os << (i ? "," : "") << c.anchors[i].first << 'x' << c.anchors[i].second;
    os << " blocks=";
    for (std::size_t i = 0; i < c.blocks.size(); ++i)
        os << (i ? "," : "") << c.blocks[i].first << 's' << c.blocks[i].second;
    os << '\n';
    for (const Tensor& t : params.tensors) write_tensor(os, t);
    if (!os) throw std::runtime_error("write failed for " + path);
}

DetectorParams load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::string header;
    std::getline(is, header);
    std::istringstream hs(header);
    std::string tag;
    hs >> tag;
    if (tag != "miniyolo") throw std::runtime_error("not a miniyolo weights file: " + path);
    DetectorParams p;
    p.config.anchors.clear();
    p.config.blocks.clear();
    std::string kv;
    while (hs >> kv) {
        const auto eq = kv.find('=');
        const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        if (key == "image_size") p.config.image_size = std::stoi(val);
        else if (key == "grid") p.config.grid = std::stoi(val);
        else if (key == "boxes") p.config.boxes = std::stoi(val);
        else if (key == "classes") p.config.classes = std::stoi(val);
        else if (key == "anchors") {
            std::istringstream as(val);
            std::string item;
            while (std::getline(as, item, ',')) {
                const auto x = item.find('x');
                p.config.anchors.emplace_back(std::stod(item.substr(0, x)), std::stod(item.substr(x + 1)));
            }
        } else if (key == "blocks") {
            std::istringstream bs(val);
            std::string item;
            while (std::getline(bs, item, ',')) {
                const auto s = item.find('s');
                p.config.blocks.emplace_back(std::stoi(item.substr(0, s)), std::stoi(item.substr(s + 1)));
            }
        }
    }
    p.config.validate();
    const std::size_t n_tensors = (p.config.blocks.size() + 1) * 2;
    for (std::size_t i = 0; i < n_tensors; ++i) p.tensors.push_back(read_tensor(is));
    return p;
}

std::vector<NodeId> param_leaves(Graph& g, const DetectorParams& params, bool requires_grad) {
    std::vector<NodeId> ids;
    ids.reserve(params.tensors.size());
    for (const Tensor& t : params.tensors) ids.push_back(g.leaf(t, requires_grad));
    return ids;
}

NodeId forward_node(Graph& g, const std::vector<NodeId>& params, NodeId image, const DetectorConfig& config) {
    const Tensor& img = g.value(image);
    if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != config.image_size || img.dim(2) != config.image_size)
        throw std::invalid_argument("forward: image does not match configured size");
    NodeId x = image;
    std::size_t pi = 0;
    for (auto [ch, stride] : config.blocks) {
        x = g.conv2d(x, params[pi], params[pi + 1], stride, 1);
        x = g.leaky_relu(x, static_cast<float>(config.leaky_slope));
        pi += 2;
    }
    return g.conv2d(x, params[pi], params[pi + 1], 1, 0);
}

GridPrediction infer(const DetectorParams& params, const Tensor& image) {
    const DetectorConfig& c = params.config;
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != c.image_size || image.dim(2) != c.image_size)
        throw std::invalid_argument("infer: image does not match configured size");
    Tensor x = image;
    std::size_t pi = 0;
    const float slope = static_cast<float>(c.leaky_slope);
    for (auto [ch, stride] : c.blocks) {
        x = conv2d_forward(x, params.tensors[pi], params.tensors[pi + 1].data(), stride, 1);
        for (std::size_t i = 0; i < x.size(); ++i)
            if (x[i] < 0.0f) x[i] *= slope;
        pi += 2;
    }
    x = conv2d_forward(x, params.tensors[pi], params.tensors[pi + 1].data(), 1, 0);
    return {std::move(x), c};
}

namespace {

Box decode_box(const GridPrediction& grid, int b, int row, int col) {
    const DetectorConfig& c = grid.config;
    const double cell = c.cell_size();
    const double cx = (col + sigmoid_d(grid.at(b, 0, row, col))) * cell;
    const double cy = (row + sigmoid_d(grid.at(b, 1, row, col))) * cell;
    const double tw = std::clamp<double>(grid.at(b, 2, row, col), -8.0, 8.0);
    const double th = std::clamp<double>(grid.at(b, 3, row, col), -8.0, 8.0);
    const double w = c.anchors[static_cast<std::size_t>(b)].first * std::exp(tw);
    const double h = c.anchors[static_cast<std::size_t>(b)].second * std::exp(th);
    Box box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
    box.x1 = std::clamp<double>(box.x1, 0, c.image_size);
    box.y1 = std::clamp<double>(box.y1, 0, c.image_size);
    box.x2 = std::clamp<double>(box.x2, 0, c.image_size);
    box.y2 = std::clamp<double>(box.y2, 0, c.image_size);
    return box;
}

}  // namespace

std::vector<Detection> decode(const GridPrediction& grid, double conf_threshold) {
    const DetectorConfig& c = grid.config;
    std::vector<Detection> dets;
    std::vector<double> probs(static_cast<std::size_t>(c.classes));
    for (int row = 0; row < c.grid; ++row)
        for (int col = 0; col < c.grid; ++col)
            for (int b = 0; b < c.boxes; ++b) {
                const double obj = sigmoid_d(grid.at(b, 4, row, col));
                double zmax = -1e30;
                for (int k = 0; k < c.classes; ++k) zmax = std::max(zmax, static_cast<double>(grid.at(b, 5 + k, row, col)));
                double denom = 0.0;
                for (int k = 0; k < c.classes; ++k) {
                    probs[static_cast<std::size_t>(k)] = std::exp(grid.at(b, 5 + k, row, col) - zmax);
                    denom += probs[static_cast<std::size_t>(k)];
                }
                int best = 0;
                for (int k = 1; k < c.classes; ++k)
                    if (probs[static_cast<std::size_t>(k)] > probs[static_cast<std::size_t>(best)]) best = k;
                const double class_prob = probs[static_cast<std::size_t>(best)] / denom;
                const double conf = obj * class_prob;
                if (conf < conf_threshold) continue;
                Detection d;
                d.box = decode_box(grid, b, row, col);
                d.objectness = obj;
                d.class_id = best;
                d.class_prob = class_prob;
                d.confidence = conf;
                dets.push_back(d);
            }
    return dets;
}

Heatmap roi_heatmap(const GridPrediction& grid) {
    const DetectorConfig& c = grid.config;
    Heatmap hm;
    hm.grid = c.grid;
    hm.values.assign(static_cast<std::size_t>(c.grid) * c.grid, 0.0);
    for (int row = 0; row < c.grid; ++row)
        for (int col = 0; col < c.grid; ++col) {
            double best = 0.0;
            for (int b = 0; b < c.boxes; ++b) {
                const double obj = sigmoid_d(grid.at(b, 4, row, col));
                double zmax = -1e30, denom = 0.0, top = 0.0;
                for (int k = 0; k < c.classes; ++k) zmax = std::max(zmax, static_cast<double>(grid.at(b, 5 + k, row, col)));
                for (int k = 0; k < c.classes; ++k) {
                    const double e = std::exp(grid.at(b, 5 + k, row, col) - zmax);
                    denom += e;
                    top = std::max(top, e);
                }
                best = std::max(best, obj * top / denom);
            }
            hm.values[static_cast<std::size_t>(row) * c.grid + col] = best;
        }
    return hm;
}

double detection_loss_value(const Tensor& grid_logits, const GroundTruth& truth, const DetectorConfig& config,
                            Tensor* grad_out) {
    const int S = config.grid, B = config.boxes, C = config.classes;
    const double cell = config.cell_size();
    GridPrediction grid{grid_logits, config};

    // responsibility: per ground-truth box, per overlapped cell, the anchor box
    // with highest IoU; a (cell,box) slot keeps the best-IoU claimant
    struct Target {
        int cls;
        double ox, oy, tw, th;
        double iou_val;
    };
    std::map<int, Target> responsible;  // key = (row*S+col)*B+b
    for (const auto& lb : truth) {
        const Box& g = lb.box;
        const int c0 = std::max(0, static_cast<int>(std::floor(g.x1 / cell)));
        const int c1 = std::min(S - 1, static_cast<int>(std::ceil(g.x2 / cell)) - 1);
        const int r0 = std::max(0, static_cast<int>(std::floor(g.y1 / cell)));
        const int r1 = std::min(S - 1, static_cast<int>(std::ceil(g.y2 / cell)) - 1);
        for (int row = r0; row <= r1; ++row)
            for (int col = c0; col <= c1; ++col) {
                int best_b = 0;
                double best_iou = -1.0;
                for (int b = 0; b < B; ++b) {
                    const double v = iou(decode_box(grid, b, row, col), g);
                    if (v > best_iou) {
                        best_iou = v;
                        best_b = b;
                    }
                }
                const int key = (row * S + col) * B + best_b;
                auto it = responsible.find(key);
                if (it != responsible.end() && it->second.iou_val >= best_iou) continue;
                Target t;
                t.cls = lb.class_id;
                t.ox = g.cx() / cell - col;
                t.oy = g.cy() / cell - row;
                t.tw = std::log(g.width() / config.anchors[static_cast<std::size_t>(best_b)].first);
                t.th = std::log(g.height() / config.anchors[static_cast<std::size_t>(best_b)].second);
                t.iou_val = best_iou;
                responsible[key] = t;
            }
    }

    if (grad_out) *grad_out = Tensor(grid_logits.shape());
    auto gref = [&](int b, int f, int row, int col) -> float& {
        return grad_out->at3(b * (5 + C) + f, row, col);
    };

    double loss = 0.0;
    const double lc = config.lambda_coord, ln = config.lambda_noobj;
    for (int row = 0; row < S; ++row)
        for (int col = 0; col < S; ++col)
            for (int b = 0; b < B; ++b) {
                const int key = (row * S + col) * B + b;
                const auto it = responsible.find(key);
                const double to = grid.at(b, 4, row, col);
                if (it == responsible.end()) {
                    loss += ln * softplus(to);
                    if (grad_out) gref(b, 4, row, col) += static_cast<float>(ln * sigmoid_d(to));
                    continue;
                }
                const Target& t = it->second;
                const double tx = grid.at(b, 0, row, col), ty = grid.at(b, 1, row, col);
                const double tw = grid.at(b, 2, row, col), th = grid.at(b, 3, row, col);
                const double sx = sigmoid_d(tx), sy = sigmoid_d(ty);
                loss += lc * ((sx - t.ox) * (sx - t.ox) + (sy - t.oy) * (sy - t.oy) + (tw - t.tw) * (tw - t.tw) +
                              (th - t.th) * (th - t.th));
                loss += softplus(-to);  // objectness BCE, target 1
                for (int k = 0; k < C; ++k) {
                    const double z = grid.at(b, 5 + k, row, col);
                    const double tk = (k == t.cls) ? 1.0 : 0.0;
                    loss += softplus(z) - tk * z;  // class BCE vs one-hot
                    if (grad_out) gref(b, 5 + k, row, col) += static_cast<float>(sigmoid_d(z) - tk);
                }
                if (grad_out) {
                    gref(b, 0, row, col) += static_cast<float>(lc * 2.0 * (sx - t.ox) * sx * (1.0 - sx));
                    gref(b, 1, row, col) += static_cast<float>(lc * 2.0 * (sy - t.oy) * sy * (1.0 - sy));
                    gref(b, 2, row, col) += static_cast<float>(lc * 2.0 * (tw - t.tw));
                    gref(b, 3, row, col) += static_cast<float>(lc * 2.0 * (th - t.th));
                    gref(b, 4, row, col) += static_cast<float>(sigmoid_d(to) - 1.0);
                }
            }
    return loss;
}

NodeId detection_loss_node(Graph& g, NodeId grid, const GroundTruth& truth, const DetectorConfig& config) {
    for (const auto& lb : truth)
        if (lb.box.x1 < 0 || lb.box.y1 < 0 || lb.box.x2 > config.image_size || lb.box.y2 > config.image_size ||
            lb.box.x1 >= lb.box.x2 || lb.box.y1 >= lb.box.y2)
            throw std::invalid_argument("detection_loss: truth box outside image or degenerate");
    Tensor grad;
    const double loss = detection_loss_value(g.value(grid), truth, config, &grad);
    Tensor value({1});
    value[0] = static_cast<float>(loss);
    return g.custom({grid}, std::move(value), [grad](const Tensor& gout, const std::vector<Tensor*>& gin) {
        if (gin[0])
            for (std::size_t i = 0; i < grad.size(); ++i) (*gin[0])[i] += gout[0] * grad[i];
    });
}

std::vector<Detection> detect(const DetectorParams& params, const Tensor& image, double conf_threshold,
                              double nms_iou) {
    return nms(decode(infer(params, image), conf_threshold), nms_iou);
}

std::vector<std::string> class_name_list(const SceneConfig& scene_config) {
    std::vector<std::string> names;
    for (ShapeKind k : scene_config.classes) names.push_back(shape_name(k));
    return names;
}

EvalReport evaluate_map50(const DetectorParams& params, const std::vector<Scene>& dataset, double conf_threshold,
                          double nms_iou) {
    std::vector<std::vector<Detection>> dets(dataset.size());
    std::vector<GroundTruth> truths(dataset.size());
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < static_cast<int>(dataset.size()); ++i) {
        dets[static_cast<std::size_t>(i)] = detect(params, dataset[static_cast<std::size_t>(i)].image, conf_threshold, nms_iou);
        truths[static_cast<std::size_t>(i)] = dataset[static_cast<std::size_t>(i)].truth;
    }
    std::vector<std::string> names;
    for (int c = 0; c < params.config.classes; ++c) names.push_back(shape_name(static_cast<ShapeKind>(c)));
    return aggregate_map(dets, truths, names, conf_threshold);
}

TrainResult train(const std::vector<Scene>& train_set, const DetectorConfig& config, const TrainConfig& tc,
                  const std::vector<Scene>* val_set) {
    if (train_set.empty()) throw std::invalid_argument("train: dataset is empty");
    config.validate();
    TrainResult result;
    result.params = DetectorParams::init(config, tc.seed);
    SgdMomentum opt(tc.lr, tc.momentum);
    Rng rng(tc.seed ^ 0x5eed5eed5eed5eedULL);

    std::vector<int> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    const std::size_t n_params = result.params.tensors.size();
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        if (epoch > 0 && tc.lr_decay != 1.0) opt.set_lr(opt.lr() * tc.lr_decay);
        // Fisher-Yates with the deterministic rng
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

        double epoch_loss = 0.0;
        int n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(tc.batch));
            const int bsize = static_cast<int>(end - start);

            std::vector<std::vector<Tensor>> grads(static_cast<std::size_t>(bsize));
            std::vector<double> losses(static_cast<std::size_t>(bsize), 0.0);
#pragma omp parallel for schedule(dynamic)
            for (int i = 0; i < bsize; ++i) {
                const Scene& scene = train_set[static_cast<std::size_t>(order[start + static_cast<std::size_t>(i)])];
                Graph g;
                auto pn = param_leaves(g, result.params, true);
                NodeId img = g.leaf(scene.image, false);
                NodeId grid = forward_node(g, pn, img, config);
                NodeId loss = detection_loss_node(g, grid, scene.truth, config);
                losses[static_cast<std::size_t>(i)] = g.value(loss)[0];
                GradientMap gm = g.backward(loss);
                auto& slot = grads[static_cast<std::size_t>(i)];
                slot.reserve(n_params);
                for (NodeId id : pn) slot.push_back(std::move(gm.at(id)));
            }

            // fixed-order reduction across the batch
            std::vector<Tensor> total;
            total.reserve(n_params);
            for (std::size_t p = 0; p < n_params; ++p) total.emplace_back(result.params.tensors[p].shape());
            const float inv = 1.0f / static_cast<float>(bsize);
            for (int i = 0; i < bsize; ++i)
                for (std::size_t p = 0; p < n_params; ++p) {
                    Tensor& acc = total[p];
                    const Tensor& gp = grads[static_cast<std::size_t>(i)][p];
                    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += gp[j] * inv;
                }

            double batch_loss = 0.0;
            for (double l : losses) batch_loss += l;
            batch_loss /= bsize;
            if (!std::isfinite(batch_loss)) throw DivergenceError(epoch);
            epoch_loss += batch_loss;
            ++n_batches;

            if (tc.grad_clip > 0.0) {
                double sq = 0.0;
                for (const Tensor& t : total)
                    for (std::size_t j = 0; j < t.size(); ++j) sq += static_cast<double>(t[j]) * t[j];
                const double norm = std::sqrt(sq);
                if (norm > tc.grad_clip) {
                    const float scale = static_cast<float>(tc.grad_clip / norm);
                    for (Tensor& t : total)
                        for (std::size_t j = 0; j < t.size(); ++j) t[j] *= scale;
                }
            }

            std::vector<Tensor*> param_ptrs;
            std::vector<const Tensor*> grad_ptrs;
            for (std::size_t p = 0; p < n_params; ++p) {
                param_ptrs.push_back(&result.params.tensors[p]);
                grad_ptrs.push_back(&total[p]);
            }
            opt.step(param_ptrs, grad_ptrs);
        }
        result.epoch_loss.push_back(epoch_loss / std::max(1, n_batches));

        if (tc.validate_each_epoch && val_set) {
            result.epoch_val_map.push_back(evaluate_map50(result.params, *val_set, tc.val_conf).map);
        }
        if (tc.verbose) {
            std::fprintf(stderr, "epoch %d loss %.4f", epoch, result.epoch_loss.back());
            if (!result.epoch_val_map.empty() && tc.validate_each_epoch)
                std::fprintf(stderr, " val_map %.4f", result.epoch_val_map.back());
            std::fprintf(stderr, "\n");
        }
    }
    return result;
}

}  // namespace patchforge
