#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace expost {

/// Boolean attention visibility: rows are queries, columns are keys.
class MaskMatrix {
public:
    MaskMatrix() = default;
    MaskMatrix(int rows, int cols, bool value = false)
        : rows_(rows), cols_(cols), bits_(static_cast<std::size_t>(rows) * cols, value ? 1 : 0) {
        if (rows < 0 || cols < 0) throw std::invalid_argument("negative mask shape");
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }

    bool at(int r, int c) const { return bits_[index(r, c)] != 0; }
    void set(int r, int c, bool v) { bits_[index(r, c)] = v ? 1 : 0; }

    /// True when no entry lies above the causal diagonal. The diagonal is
    /// offset by cols - rows so that a mask for new rows over (cache + new)
    /// columns is judged against its own envelope.
    bool within_causal_envelope() const {
        const int offset = cols_ - rows_;
        for (int r = 0; r < rows_; ++r)
            for (int c = r + offset + 1; c < cols_; ++c)
                if (at(r, c)) return false;
        return true;
    }

    /// 0/1 grid, one row per line.
    std::string dump() const {
        std::ostringstream os;
        for (int r = 0; r < rows_; ++r) {
            for (int c = 0; c < cols_; ++c) os << (at(r, c) ? '1' : '0');
            os << '\n';
        }
        return os.str();
    }

    bool operator==(const MaskMatrix&) const = default;

private:
    std::size_t index(int r, int c) const {
        if (r < 0 || r >= rows_ || c < 0 || c >= cols_) throw std::out_of_range("mask index out of range");
        return static_cast<std::size_t>(r) * cols_ + c;
    }

    int rows_ = 0;
    int cols_ = 0;
    std::vector<std::uint8_t> bits_;
};

} // namespace expost
