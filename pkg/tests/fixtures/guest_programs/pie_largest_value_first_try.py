def execute():
  """
  Computes the value of the largest pie section.

  The largest pie section is the one that represents the largest percentage
  of the pie. In this case, the largest pie section is the one that
  represents the percentage of people who support allowing companies
  from other countries to invest in Pemex. This percentage is 34%

  Args:
    None

  Returns:
    The value of the largest pie section as a float.
  """

  # Get the value of the largest pie section.
  largest_pie_section = 34

  # Return the value of the largest pie section.
  return largest_pie_section
ans = execute()
