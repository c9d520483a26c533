#include "gendistill/losses.hpp"

#include <set>
#include <sstream>

#include "gendistill/errors.hpp"

namespace gendistill {

using torch::autograd::AutogradContext;
using torch::autograd::variable_list;

void DistillConfig::validate() const {
  if (lambda_at < 0.0 || lambda_d < 0.0 || lambda_ld < 0.0) throw ConfigError("distill weights must be >= 0");
  if (!(tau > 0.0)) throw ConfigError("distill.tau must be > 0");
  if (p < 1) throw ConfigError("distill.p must be >= 1");
  if (!(eps > 0.0)) throw ConfigError("distill.eps must be > 0");
  if (levels.empty()) throw ConfigError("distill.levels must not be empty");
  std::set<int> seen;
  for (int l : levels) {
    if (l < FeaturePyramid::kMinLevel || l > FeaturePyramid::kMaxLevel || !seen.insert(l).second) {
      throw ConfigError("distill.levels must be distinct values in {2,3,4,5}");
    }
  }
}

void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = nlohmann::json{{"lambda_at", c.lambda_at},     {"p", c.p},
                     {"tau", c.tau},                 {"lambda_d", c.lambda_d},
                     {"lambda_ld", c.lambda_ld},     {"levels", c.levels},
                     {"eps", c.eps},                 {"mse_raw_sum", c.mse_raw_sum},
                     {"kd_tau_squared", c.kd_tau_squared}};
}

void from_json(const nlohmann::json& j, DistillConfig& c) {
  j.at("lambda_at").get_to(c.lambda_at);
  j.at("p").get_to(c.p);
  j.at("tau").get_to(c.tau);
  j.at("lambda_d").get_to(c.lambda_d);
  j.at("lambda_ld").get_to(c.lambda_ld);
  j.at("levels").get_to(c.levels);
  j.at("eps").get_to(c.eps);
  j.at("mse_raw_sum").get_to(c.mse_raw_sum);
  j.at("kd_tau_squared").get_to(c.kd_tau_squared);
}

namespace {

// |x|^(p-1) * sign(x): derivative of |x|^p / p.
torch::Tensor signed_power(const torch::Tensor& x, int p) {
  if (p == 1) return x.sign();
  if (p == 2) return x;
  return x.abs().pow(p - 1) * x.sign();
}

// Vectorized attention maps [B, HW] and their normalized form.
struct NormalizedAttention {
  torch::Tensor map;    // a
  torch::Tensor norm;   // ||a||_2, [B,1]
  torch::Tensor unit;   // a / (||a|| + eps)
};

NormalizedAttention normalized_attention(const torch::Tensor& f, int p) {
  NormalizedAttention out;
  out.map = attention_map(f, p).flatten(1);
  out.norm = out.map.pow(2).sum(1, true).sqrt();
  out.unit = out.map / (out.norm + kAttentionNormEps);
  return out;
}

class MseLevelFunction : public torch::autograd::Function<MseLevelFunction> {
 public:
  static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& student, const torch::Tensor& target,
                               bool raw_sum) {
    auto diff = student - target;
    const double scale = raw_sum ? 2.0 : 2.0 / static_cast<double>(student.numel());
    ctx->save_for_backward({diff});
    ctx->saved_data["scale"] = scale;
    auto sq = diff.pow(2);
    return raw_sum ? sq.sum() : sq.mean();
  }

  static variable_list backward(AutogradContext* ctx, variable_list grad_outputs) {
    const auto diff = ctx->get_saved_variables()[0];
    const double scale = ctx->saved_data["scale"].toDouble();
    return {grad_outputs[0] * scale * diff, torch::Tensor(), torch::Tensor()};
  }
};

class AtLevelFunction : public torch::autograd::Function<AtLevelFunction> {
 public:
  static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& student, const torch::Tensor& teacher,
                               int64_t p) {
    const int pi = static_cast<int>(p);
    const auto s = normalized_attention(student, pi);
    const auto t = normalized_attention(teacher, pi);
    const auto v = s.unit - t.unit;
    const auto dist = v.abs().pow(static_cast<double>(p)).sum(1).pow(1.0 / static_cast<double>(p));
    ctx->save_for_backward({student, s.map, s.norm, v, dist});
    ctx->saved_data["p"] = p;
    return dist.mean();
  }

  static variable_list backward(AutogradContext* ctx, variable_list grad_outputs) {
    const auto saved = ctx->get_saved_variables();
    const auto& student = saved[0];
    const auto& a = saved[1];
    const auto& n = saved[2];
    const auto& v = saved[3];
    const auto& d = saved[4];
    const int p = static_cast<int>(ctx->saved_data["p"].toInt());
    const int64_t batch = student.size(0);

    // d ||v||_p / dv, zero where the distance vanishes.
    const auto d_col = d.unsqueeze(1);
    auto u = signed_power(v, p) / d_col.pow(p - 1);
    u = torch::where(d_col > 0, u, torch::zeros_like(u));

    // Through a / (||a|| + eps).
    const auto denom = n + kAttentionNormEps;
    const auto au = (a * u).sum(1, true);
    auto grad_a = u / denom;
    grad_a = grad_a - torch::where(n > 0, a * au / (denom.pow(2) * n.clamp_min(kAttentionNormEps)), torch::zeros_like(a));

    // Through a = sum_c |f_c|^p.
    const auto grad_map = grad_a.view({batch, 1, student.size(2), student.size(3)});
    auto grad_student = grad_map * static_cast<double>(p) * signed_power(student, p);
    grad_student = grad_student * (grad_outputs[0] / static_cast<double>(batch));
    return {grad_student, torch::Tensor(), torch::Tensor()};
  }
};

class InterpreterLossFunction : public torch::autograd::Function<InterpreterLossFunction> {
 public:
  static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& logits, const torch::Tensor& labels,
                               double lambda_d) {
    const int64_t classes = logits.size(1);
    const auto valid = (labels != kIgnoreIndex).to(logits.dtype()).unsqueeze(1);       // [B,1,H,W]
    const auto safe = torch::where(labels == kIgnoreIndex, torch::zeros_like(labels), labels);
    const auto onehot = torch::one_hot(safe, classes).permute({0, 3, 1, 2}).to(logits.dtype()) * valid;
    const auto log_prob = torch::log_softmax(logits, 1);
    const auto prob = log_prob.exp();
    const double pixels = valid.sum().item<double>();
    if (pixels == 0.0) {
      ctx->saved_data["empty"] = true;
      return torch::zeros({}, logits.options());
    }
    ctx->saved_data["empty"] = false;

    const auto ce = -(log_prob * onehot).sum() / pixels;

    const std::vector<int64_t> reduce{0, 2, 3};
    const auto inter = (prob * onehot).sum(reduce);
    const auto pred_mass = (prob * valid).sum(reduce);
    const auto target_mass = onehot.sum(reduce);
    const auto present = (target_mass > 0).to(logits.dtype());
    const double n_present = present.sum().item<double>();
    const auto denom = pred_mass + target_mass + kDiceEps;
    const auto dice = 1.0 - (present * 2.0 * inter / denom).sum() / n_present;

    ctx->save_for_backward({prob, onehot, valid, inter, denom, present});
    ctx->saved_data["pixels"] = pixels;
    ctx->saved_data["n_present"] = n_present;
    ctx->saved_data["lambda_d"] = lambda_d;
    return ce + lambda_d * dice;
  }

  static variable_list backward(AutogradContext* ctx, variable_list grad_outputs) {
    if (ctx->saved_data["empty"].toBool()) return {torch::Tensor(), torch::Tensor(), torch::Tensor()};
    const auto saved = ctx->get_saved_variables();
    const auto& prob = saved[0];
    const auto& onehot = saved[1];
    const auto& valid = saved[2];
    const auto view = std::vector<int64_t>{1, -1, 1, 1};
    const auto inter = saved[3].view(view);
    const auto denom = saved[4].view(view);
    const auto present = saved[5].view(view);
    const double pixels = ctx->saved_data["pixels"].toDouble();
    const double n_present = ctx->saved_data["n_present"].toDouble();
    const double lambda_d = ctx->saved_data["lambda_d"].toDouble();

    auto grad = (prob - onehot) * valid / pixels;

    // Dice: dD/dp_k = -(1/|P|) (2 g_k / den_k - 2 I_k / den_k^2) on valid pixels.
    const auto d_prob = -(present / n_present) * (2.0 * onehot / denom - 2.0 * inter / denom.pow(2)) * valid;
    const auto softmax_back = prob * (d_prob - (prob * d_prob).sum(1, true));
    grad = grad + lambda_d * softmax_back;
    return {grad * grad_outputs[0], torch::Tensor(), torch::Tensor()};
  }
};

class LabelDistillFunction : public torch::autograd::Function<LabelDistillFunction> {
 public:
  static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& teacher_logits,
                               const torch::Tensor& student_logits, double tau, double scale) {
    const auto target = torch::softmax(teacher_logits / tau, 1);
    const auto log_student = torch::log_softmax(student_logits / tau, 1);
    const double positions = static_cast<double>(student_logits.numel() / student_logits.size(1));
    ctx->save_for_backward({target, log_student});
    ctx->saved_data["tau"] = tau;
    ctx->saved_data["scale"] = scale / positions;
    return -(target * log_student).sum() * (scale / positions);
  }

  static variable_list backward(AutogradContext* ctx, variable_list grad_outputs) {
    const auto saved = ctx->get_saved_variables();
    const double tau = ctx->saved_data["tau"].toDouble();
    const double scale = ctx->saved_data["scale"].toDouble();
    auto grad = (saved[1].exp() - saved[0]) * (scale / tau) * grad_outputs[0];
    return {torch::Tensor(), grad, torch::Tensor(), torch::Tensor()};
  }
};

void check_level_pair(const FeaturePyramid& regressed, const FeaturePyramid& teacher, int level, bool same_channels) {
  if (!regressed.has_level(level) || !teacher.has_level(level)) {
    throw ShapeError("distillation level " + std::to_string(level) + " missing from a pyramid");
  }
  const auto& r = regressed.at(level);
  const auto& g = teacher.at(level);
  const bool spatial_ok = r.size(0) == g.size(0) && r.size(2) == g.size(2) && r.size(3) == g.size(3);
  if (!spatial_ok || (same_channels && r.size(1) != g.size(1))) {
    std::ostringstream msg;
    msg << "level " << level << " shape mismatch: " << r.sizes() << " vs " << g.sizes();
    throw ShapeError(msg.str());
  }
}

}  // namespace

torch::Tensor whiten(const torch::Tensor& f, double eps) {
  if (f.dim() < 2 || f.size(1) < 1) throw ShapeError("whiten: expected channels on axis 1");
  torch::NoGradGuard no_grad;
  const auto mu = f.mean(1, true);
  const auto centered = f - mu;
  const auto var = centered.pow(2).mean(1, true);
  return centered / (var + eps).sqrt();
}

torch::Tensor attention_map(const torch::Tensor& f, int p) {
  if (p < 1) throw ConfigError("attention_map: p must be >= 1");
  if (f.dim() != 4) throw ShapeError("attention_map: expected [B,C,H,W]");
  if (p == 2) return f.pow(2).sum(1, true);
  return f.abs().pow(static_cast<double>(p)).sum(1, true);
}

torch::Tensor mse_level_loss(const torch::Tensor& student, const torch::Tensor& target, bool raw_sum) {
  if (student.sizes() != target.sizes()) throw ShapeError("mse_level_loss: shape mismatch");
  return MseLevelFunction::apply(student, target.detach(), raw_sum);
}

torch::Tensor at_level_loss(const torch::Tensor& student, const torch::Tensor& teacher, int p) {
  if (p < 1) throw ConfigError("at_level_loss: p must be >= 1");
  if (student.dim() != 4 || teacher.dim() != 4 || student.size(0) != teacher.size(0) ||
      student.size(2) != teacher.size(2) || student.size(3) != teacher.size(3)) {
    throw ShapeError("at_level_loss: batch and spatial dims must match");
  }
  return AtLevelFunction::apply(student, teacher.detach(), static_cast<int64_t>(p));
}

torch::Tensor mse_distill_loss(const FeaturePyramid& regressed, const FeaturePyramid& teacher,
                               const DistillConfig& config) {
  config.validate();
  torch::Tensor total;
  for (int level : config.levels) {
    check_level_pair(regressed, teacher, level, true);
    auto term = mse_level_loss(regressed.at(level), whiten(teacher.at(level), config.eps), config.mse_raw_sum);
    total = total.defined() ? total + term : term;
  }
  return total / static_cast<double>(config.levels.size());
}

torch::Tensor at_distill_loss(const FeaturePyramid& regressed, const FeaturePyramid& teacher,
                              const DistillConfig& config) {
  config.validate();
  torch::Tensor total;
  for (int level : config.levels) {
    check_level_pair(regressed, teacher, level, false);
    auto term = at_level_loss(regressed.at(level), teacher.at(level), config.p);
    total = total.defined() ? total + term : term;
  }
  return total / static_cast<double>(config.levels.size());
}

FeatLossTerms feat_loss(const FeaturePyramid& regressed, const FeaturePyramid& teacher, const DistillConfig& config) {
  FeatLossTerms terms;
  terms.mse = mse_distill_loss(regressed, teacher, config);
  terms.at = at_distill_loss(regressed, teacher, config);
  terms.total = config.lambda_at == 0.0 ? terms.mse : terms.mse + config.lambda_at * terms.at;
  return terms;
}

double feat_loss(double mse, double at, const DistillConfig& config) { return mse + config.lambda_at * at; }

torch::Tensor interpreter_loss(const torch::Tensor& logits, const torch::Tensor& labels, const DistillConfig& config) {
  if (logits.dim() != 4 || labels.dim() != 3 || logits.size(0) != labels.size(0) ||
      logits.size(2) != labels.size(1) || logits.size(3) != labels.size(2)) {
    throw ShapeError("interpreter_loss: expected logits [B,K,H,W] and labels [B,H,W]");
  }
  const auto long_labels = labels.to(torch::kLong);
  const auto in_range = (long_labels >= 0) & (long_labels < logits.size(1));
  if (!(in_range | (long_labels == kIgnoreIndex)).all().item<bool>()) {
    throw ShapeError("interpreter_loss: label value outside [0, " + std::to_string(logits.size(1) - 1) +
                     "] (class count mismatch)");
  }
  return InterpreterLossFunction::apply(logits, long_labels, config.lambda_d);
}

torch::Tensor label_distill_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits,
                                 const DistillConfig& config) {
  if (!(config.tau > 0.0)) throw ConfigError("label_distill_loss: tau must be > 0");
  if (teacher_logits.sizes() != student_logits.sizes() || student_logits.dim() < 2) {
    throw ShapeError("label_distill_loss: teacher and student logits must share shape [B,K,...]");
  }
  const double scale = config.kd_tau_squared ? config.tau * config.tau : 1.0;
  return LabelDistillFunction::apply(teacher_logits.detach(), student_logits, config.tau, scale);
}

torch::Tensor mix_loss(const torch::Tensor& feat, const torch::Tensor& ld, const DistillConfig& config) {
  return config.lambda_ld == 0.0 ? feat : feat + config.lambda_ld * ld;
}

double mix_loss(double feat, double ld, const DistillConfig& config) { return feat + config.lambda_ld * ld; }

}  // namespace gendistill
