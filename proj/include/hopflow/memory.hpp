#ifndef HOPFLOW_MEMORY_HPP
#define HOPFLOW_MEMORY_HPP

// Heap accounting for the bench and train reports. The counters are always
// present; they only move in programs that expand HOPFLOW_DEFINE_COUNTING_ALLOCATOR()
// once at namespace scope, which replaces the global operator new/delete.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <new>

namespace hopflow::memory {

inline std::atomic<std::int64_t> g_current{0};
inline std::atomic<std::int64_t> g_peak{0};
inline std::atomic<bool> g_installed{false};

inline void on_alloc(std::size_t n)
{
    auto now = g_current.fetch_add(static_cast<std::int64_t>(n), std::memory_order_relaxed) + static_cast<std::int64_t>(n);
    auto peak = g_peak.load(std::memory_order_relaxed);
    while (now > peak && !g_peak.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
    }
}

inline void on_free(std::size_t n) { g_current.fetch_sub(static_cast<std::int64_t>(n), std::memory_order_relaxed); }

inline bool installed() { return g_installed.load(); }
inline std::int64_t current_bytes() { return g_current.load(); }
inline std::int64_t peak_bytes() { return g_peak.load(); }
inline void reset_peak() { g_peak.store(g_current.load()); }

namespace detail {

inline constexpr std::size_t kHeader = alignof(std::max_align_t) > 16 ? alignof(std::max_align_t) : 16;

inline void* counted_alloc(std::size_t n, std::size_t align)
{
    const std::size_t header = align > kHeader ? align : kHeader;
    void* raw = align > kHeader ? std::aligned_alloc(align, ((header + n + align - 1) / align) * align) : std::malloc(header + n);
    if (!raw) return nullptr;
    auto* base = static_cast<unsigned char*>(raw);
    auto* user = base + header;
    reinterpret_cast<std::size_t*>(user)[-1] = n;
    reinterpret_cast<std::size_t*>(user)[-2] = header;
    on_alloc(n);
    return user;
}

inline void counted_free(void* p)
{
    if (!p) return;
    auto* user = static_cast<unsigned char*>(p);
    const std::size_t n = reinterpret_cast<std::size_t*>(user)[-1];
    const std::size_t header = reinterpret_cast<std::size_t*>(user)[-2];
    on_free(n);
    std::free(user - header);
}

inline void* counted_alloc_or_throw(std::size_t n, std::size_t align)
{
    void* p = counted_alloc(n ? n : 1, align);
    if (!p) throw std::bad_alloc();
    return p;
}

struct Installed {
    Installed() { g_installed.store(true); }
};

} // namespace detail
} // namespace hopflow::memory

#define HOPFLOW_DEFINE_COUNTING_ALLOCATOR()                                                                                   \
    static ::hopflow::memory::detail::Installed hopflow_counting_allocator_installed_;                                        \
    void* operator new(std::size_t n) { return ::hopflow::memory::detail::counted_alloc_or_throw(n, 0); }                   \
    void* operator new[](std::size_t n) { return ::hopflow::memory::detail::counted_alloc_or_throw(n, 0); }                 \
    void* operator new(std::size_t n, const std::nothrow_t&) noexcept { return ::hopflow::memory::detail::counted_alloc(n ? n : 1, 0); } \
    void* operator new[](std::size_t n, const std::nothrow_t&) noexcept { return ::hopflow::memory::detail::counted_alloc(n ? n : 1, 0); } \
    void* operator new(std::size_t n, std::align_val_t a) { return ::hopflow::memory::detail::counted_alloc_or_throw(n, static_cast<std::size_t>(a)); } \
    void* operator new[](std::size_t n, std::align_val_t a) { return ::hopflow::memory::detail::counted_alloc_or_throw(n, static_cast<std::size_t>(a)); } \
    void operator delete(void* p) noexcept { ::hopflow::memory::detail::counted_free(p); }                                   \
    void operator delete[](void* p) noexcept { ::hopflow::memory::detail::counted_free(p); }                                 \
    void operator delete(void* p, std::size_t) noexcept { ::hopflow::memory::detail::counted_free(p); }                      \
    void operator delete[](void* p, std::size_t) noexcept { ::hopflow::memory::detail::counted_free(p); }                    \
    void operator delete(void* p, const std::nothrow_t&) noexcept { ::hopflow::memory::detail::counted_free(p); }            \
    void operator delete[](void* p, const std::nothrow_t&) noexcept { ::hopflow::memory::detail::counted_free(p); }          \
    void operator delete(void* p, std::align_val_t) noexcept { ::hopflow::memory::detail::counted_free(p); }                 \
    void operator delete[](void* p, std::align_val_t) noexcept { ::hopflow::memory::detail::counted_free(p); }               \
    void operator delete(void* p, std::size_t, std::align_val_t) noexcept { ::hopflow::memory::detail::counted_free(p); }    \
    void operator delete[](void* p, std::size_t, std::align_val_t) noexcept { ::hopflow::memory::detail::counted_free(p); }

#endif
