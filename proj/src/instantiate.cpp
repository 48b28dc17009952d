// Explicit instantiations of the library templates for the element types in use.

#include "lsf/lsf.hpp"

namespace lsf {

template class Array2D<double>;
template class Array2D<std::uint8_t>;
template class Array2D<std::uint16_t>;
template class Array3D<double>;

template class Network<float>;
template class Network<double>;
template struct Adam<float>;
template struct Adam<double>;

template void softmax_channels<float>(std::span<float>, std::size_t, std::size_t);
template void softmax_channels<double>(std::span<double>, std::size_t, std::size_t);
template double soft_dice_loss<float>(std::span<const float>, std::span<const float>, std::size_t,
                                      std::span<const char>, std::span<float>);
template double soft_dice_loss<double>(std::span<const double>, std::span<const double>, std::size_t,
                                       std::span<const char>, std::span<double>);
template std::vector<float> standardize<float>(const Image&);
template std::vector<double> standardize<double>(const Image&);
template Mask argmax_channels<float>(std::span<const float>, std::size_t, std::size_t, std::size_t);
template Mask argmax_channels<double>(std::span<const double>, std::size_t, std::size_t, std::size_t);

}  // namespace lsf
