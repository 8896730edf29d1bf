#pragma once
#include <cstdint>
#include <string>
#include <vector>

namespace mm {

struct TaskSample {
    std::vector<int> tokens;
    std::vector<int> targets;
    std::vector<std::uint8_t> mask;

    std::size_t length() const { return tokens.size(); }
};

// Two channels; events[i][k] is the token set of the k-th event of channel i,
// resets[i] the restart tokens of channel i.
struct SequencesSpec {
    int n = 1;
    int vocab = 1;
    std::vector<std::vector<std::vector<int>>> events;
    std::vector<std::vector<int>> resets;

    void validate() const;
};

// 2n disjoint event sets of 3 tokens, 2 reset sets of 2 tokens, 4 neutral fillers
SequencesSpec sequences_defaults(int n);

enum class TaskKind { latching, sequences, induction_heads };

struct TaskSpec {
    TaskKind kind = TaskKind::latching;
    int n = 1;
    int window = 30;  // induction heads: first marker within steps 1..window
    SequencesSpec seq;  // sequences only; filled from defaults when empty

    int vocab() const;
    int n_classes() const;
    // true when loss and accuracy are taken at every step
    bool seq_to_seq() const { return kind != TaskKind::induction_heads; }
    void validate() const;
};

TaskKind parse_task_kind(const std::string& s);
const char* to_string(TaskKind k);

TaskSample gen_latching(int n, std::size_t T, std::uint64_t seed);
// targets are y_0 + 2 * y_1
TaskSample gen_sequences(const SequencesSpec& spec, std::size_t T, std::uint64_t seed);
// token 0 is the marker, 1..n the recall candidates, n + 1 a neutral filler
TaskSample gen_induction_heads(int n, std::size_t T, std::uint64_t seed, int window);

TaskSample generate(const TaskSpec& spec, std::size_t T, std::uint64_t seed);
// per-sample seeds drawn from one stream; identical arguments give identical sets
std::vector<TaskSample> generate_set(const TaskSpec& spec, const std::vector<std::size_t>& lengths,
                                     std::size_t count, std::uint64_t seed);

// one JSON object per line: {"length", "tokens", "targets", "mask"}
void dump_jsonl(const std::string& path, const std::vector<TaskSample>& samples);
std::vector<TaskSample> load_jsonl(const std::string& path);

}  // namespace mm
