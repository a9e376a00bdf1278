#pragma once
// Instruction templates used to build dialogue data.

#include <array>
#include <string>
#include <string_view>

namespace mllmreid::text {

/// Instruction given to a text-only LLM to extend a caption into a
/// continuation (the inference-only step; see synth::ContinuationOracle).
inline constexpr std::string_view kTextContinuationInstruction =
    "Continue the following text in a coherent and engaging style with less than 20 words.";

/// Image-side continuation instruction, kept verbatim including role markers.
inline constexpr std::string_view kImageContinuationTemplate =
    "###Human: continue the following image <Img> <ImageFeature> </Img>. When continuing, focus on the persons in "
    "the picture and generate a continuation related to the persons.\n###Assistant:\n";

/// The part of kImageContinuationTemplate between the role markers; this is
/// the per-turn instruction text that format_dialogue wraps.
std::string image_continuation_instruction();

/// Diverse appearance prompts for the baseline recipe. The first six are the
/// published examples; the rest follow the same attire-focused pattern.
inline constexpr std::array<std::string_view, 20> kBaselinePrompts{
    "Describe the appearance of persons in the image, focusing on their attire.",
    "Elucidate the visual features of persons in the image, including their dress style.",
    "Provide a detailed interpretation of the persons' physical attributes in the image, especially their clothing "
    "combinations.",
    "Analyze the observable characteristics of persons in the image, specifically related to their clothing "
    "arrangements.",
    "Depict the physical features of persons in the image, such as their clothing combinations.",
    "Analyze the appearance of persons in the image, with a focus on their clothing coordination.",
    "Summarize what the persons in the image are wearing, from head to toe.",
    "Explain the outfit of the persons in the image, noting the colors of each garment.",
    "Report the clothing items worn by persons in the image and how they are combined.",
    "Characterize the dress style of persons in the image, paying attention to accessories.",
    "Give an account of the garments and colors visible on persons in the image.",
    "Outline the attire of persons in the image, including footwear and headwear.",
    "Detail the appearance of persons in the image, emphasizing upper and lower clothing.",
    "Portray the persons in the image by describing their clothes and carried items.",
    "Identify the visual attributes of persons in the image, especially their outfit colors.",
    "Discuss the clothing choices of persons in the image and their overall look.",
    "Characterize the persons in the image in terms of shirt, pants and shoes.",
    "Relate the key appearance details of persons in the image, such as clothing and bags.",
    "Describe how persons in the image are dressed, including any hats or bags.",
    "Interpret the outfit combinations of persons in the image and their body build.",
};

}  // namespace mllmreid::text
